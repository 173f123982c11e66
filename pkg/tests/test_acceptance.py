"""End-to-end acceptance checks, one test per criterion.

A summary line per criterion is printed at the end of the run (see conftest).
"""

import csv
import itertools
import json
import time

import numpy as np
import pytest

from fskan.cli import main as cli_main
from fskan.datagen import gen_formula, gen_set_classification, gen_signals
from fskan.expressivity import (
    build_ps_mlp,
    check_weight_tying,
    fskan_to_mlp,
    mlp_to_fskan,
)
from fskan.layers import (
    EfficientFSKALayer,
    FSInvariantLayer,
    FSKALayer,
    KABank,
    NotEquivariantError,
    canonicalize_to_fs,
)
from fskan.network import Block, Network, build_fskan
from fskan.permgroup import (
    Cyclic,
    DirectProduct,
    Symmetric,
    act,
    enumerate_orbits,
    group_elements,
    parse_group,
    stabilizer_orbit_count,
)
from fskan.spline import SplineConfig, fit_function
from fskan.train import TrainConfig, evaluate, train_run

from helpers import pair_layer, perturbed_fs_layer, randomize_bank

FAMILIES = ["S(5)", "C(6)", "prod(S(3),S(2))", "prod(S(2),C(4))",
            "gen(6; (0 1 2 3 4 5), (0 5)(1 4)(2 3))"]


# 1 ------------------------------------------------------------------------------------


def test_criterion_1_orbit_closed_forms(record_property):
    t0 = time.perf_counter()
    checked = 0
    for n in range(1, 7):
        assert enumerate_orbits(Cyclic(n), 1, 1).num_orbits == n
        checked += 1
        if n >= 2:
            assert enumerate_orbits(Symmetric(n), 1, 1).num_orbits == 2
            checked += 1
    for n, m in itertools.product(range(2, 7), repeat=2):
        assert enumerate_orbits(DirectProduct(Symmetric(n), Symmetric(m)), 1, 1).num_orbits == 4
        checked += 1
    for n, T in itertools.product(range(2, 7), range(1, 7)):
        assert enumerate_orbits(DirectProduct(Symmetric(n), Cyclic(T)), 1, 1).num_orbits == 2 * T
        checked += 1
    elapsed = time.perf_counter() - t0
    record_property("groups", checked)
    record_property("seconds", round(elapsed, 3))
    assert elapsed < 1.0


# 2 ------------------------------------------------------------------------------------


def _random_layer(kind, group, rng):
    if kind == "fs":
        layer = FSKALayer(group, 2, 2, rng=rng)
    elif kind == "fs-order2":
        layer = FSKALayer(group, 1, 2, k_in=2, k_out=2, rng=rng)
    elif kind == "invariant":
        layer = FSInvariantLayer(group, 2, 2, rng=rng)
    else:
        layer = EfficientFSKALayer(group, 2, 2, rng=rng)
    randomize_bank(layer.bank, rng)
    return layer


def _random_network(kind, group, rng):
    if kind == "ps-mlp":
        net = build_ps_mlp(group, 2, [4, 3], 2, rng=rng)
        for b in net.blocks:
            b.layer.bank.b[...] = rng.normal(0, 0.3, b.layer.bank.b.shape)
    else:
        net = build_fskan(group, 2, [3, 3], 2, layer_kind=kind, rng=rng)
        for b in net.blocks:
            randomize_bank(b.layer.bank, rng, 0.5)
    for b in net.blocks:
        if b.norm is not None:
            b.norm.running_mean = rng.normal(0, 0.3, b.norm.d)
            b.norm.running_var = rng.uniform(0.5, 2.0, b.norm.d)
    return net


def _max_deviation(model, group, k_in, k_out, rng, trials=20, batch=20, d_in=2):
    x = rng.uniform(-1.5, 1.5, (batch, group.degree**k_in, d_in))
    y = model.forward(x)
    worst = 0.0
    for _ in range(trials):
        s = group.random_element(rng)
        rhs = act(s, y, k_out) if k_out else y
        worst = max(worst, float(np.abs(model.forward(act(s, x, k_in)) - rhs).max()))
    return worst


def test_criterion_2_equivariance_suite(record_property):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    for text in FAMILIES:
        g = parse_group(text)
        for kind in ("fs", "invariant", "efficient"):
            layer = _random_layer(kind, g, rng)
            worst = max(worst, _max_deviation(layer, g, 1, layer.k_out, rng))
            cases += 1
        for kind in ("fs", "efficient", "ps-mlp"):
            net = _random_network(kind, g, rng)
            worst = max(worst, _max_deviation(net, g, 1, 0, rng))
            cases += 1
    for n in (3, 4):
        g = Symmetric(n)
        layer = _random_layer("fs-order2", g, rng)
        worst = max(worst, _max_deviation(layer, g, 2, 2, rng, d_in=1))
        cases += 1
    elapsed = time.perf_counter() - t0
    record_property("cases", cases)
    record_property("max_deviation", f"{worst:.2e}")
    record_property("seconds", round(elapsed, 2))
    assert worst < 1e-9
    assert elapsed < 10.0


# 3 ------------------------------------------------------------------------------------


def _two_position_pairs():
    cfg = SplineConfig(num_intervals=16, base_kind="none")
    c = fit_function(np.cos, -1, 1, 16)
    s = fit_function(np.sin, -1, 1, 16)
    return cfg, c, s


def test_criterion_3_canonicalization(record_property):
    rng = np.random.default_rng(3)
    # two positions: cos+2, sin-2 / sin+3, cos-3 collapses to a shared cos/sin layer
    cfg, c, s = _two_position_pairs()
    layer = pair_layer(2, [[c.plus_constant(2), s.plus_constant(-2)],
                           [s.plus_constant(3), c.plus_constant(-3)]], cfg)
    res = canonicalize_to_fs(layer, "S(2)")
    x = rng.uniform(-1, 1, (100, 2, 1))
    assert res.fs_layer.num_orbits == 2
    assert np.abs(res.fs_layer.forward(x) - layer.forward(x)).max() < 1e-8
    expect = np.stack([np.cos(x[:, 0, 0]) + np.sin(x[:, 1, 0]),
                       np.sin(x[:, 0, 0]) + np.cos(x[:, 1, 0])], axis=1)
    assert np.abs(res.fs_layer.forward(x)[..., 0] - expect).max() < 1e-5

    groups = ["S(3)", "S(4)", "C(4)", "C(5)", "prod(S(2),C(3))", "prod(S(2),S(2))"]
    worst = 0.0
    for trial in range(50):
        text = groups[trial % len(groups)]
        fs = FSKALayer(text, int(rng.integers(1, 3)), int(rng.integers(1, 3)), rng=rng)
        randomize_bank(fs.bank, rng)
        perturbed, _ = perturbed_fs_layer(fs, rng)
        res = canonicalize_to_fs(perturbed, text, rng=rng)
        xs = rng.uniform(-1, 1, (100, fs.group.degree, fs.d_in))
        worst = max(worst, float(np.abs(res.fs_layer.forward(xs) - perturbed.forward(xs)).max()))
    record_property("perturbed_max_mismatch", f"{worst:.2e}")
    assert worst < 1e-8

    # decoys: a non-constant difference, unequal row sums, and a random free layer
    decoys = [
        pair_layer(2, [[c, s], [s, fit_function(lambda t: 1.1 * np.cos(t), -1, 1, 16)]], cfg),
        pair_layer(2, [[c.plus_constant(1), s], [s, c]], cfg),
    ]
    free = FSKALayer("T(3)", 1, 1, rng=rng)
    randomize_bank(free.bank, rng)
    decoys.append(free)
    for decoy, group in zip(decoys, ["S(2)", "S(2)", "S(3)"]):
        with pytest.raises(NotEquivariantError):
            canonicalize_to_fs(decoy, group)
    record_property("decoys_rejected", len(decoys))


# 4 ------------------------------------------------------------------------------------


def _random_deepsets_mlp(rng):
    n = int(rng.integers(2, 7))
    widths = [int(w) for w in rng.integers(1, 9, 2)]
    mlp = build_ps_mlp(Symmetric(n), int(rng.integers(1, 4)), widths, int(rng.integers(1, 4)),
                       norm=False, rng=rng)
    for b in mlp.blocks:
        b.layer.bank.b[...] = rng.normal(0, 0.5, b.layer.bank.b.shape)
    return mlp


def test_criterion_4_mlp_to_fskan_exact(record_property):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        mlp = _random_deepsets_mlp(rng)
        net = mlp_to_fskan(mlp, (-1.0, 1.0))
        assert len(net.blocks) <= 2 * len(mlp.blocks)
        first = mlp.blocks[0].layer
        x = rng.uniform(-1, 1, (1000, first.n_in, first.d_in))
        worst = max(worst, float(np.abs(net.forward(x) - mlp.forward(x)).max()))
    record_property("max_error", f"{worst:.2e}")
    assert worst <= 1e-9


# 5 ------------------------------------------------------------------------------------


def test_criterion_5_fskan_to_mlp(record_property):
    rng = np.random.default_rng(5)
    eps = 1e-2
    worst, layers_checked = 0.0, 0
    groups = ["S(3)", "S(4)", "C(4)", "prod(S(2),C(2))", "C(5)"]
    for trial in range(10):
        text = groups[trial % len(groups)]
        cls = (FSKALayer, FSInvariantLayer)[trial % 2]
        layer = cls(text, 1 + trial % 2, 2, rng=rng)
        randomize_bank(layer.bank, rng, 0.5)
        net = Network(layer.group, [Block(layer)], invariant=cls is FSInvariantLayer)
        mlp, _ = fskan_to_mlp(net, (-1.0, 1.0), eps, rng=rng)
        x = rng.uniform(-1, 1, (10_000, layer.group.degree, layer.d_in))
        worst = max(worst, float(np.abs(mlp.forward(x) - net.forward(x)).max()))
        for b in mlp.blocks:
            assert check_weight_tying(b.layer, trials=20, rng=rng)
            layers_checked += 1
    record_property("max_error", f"{worst:.2e}")
    record_property("tied_layers", layers_checked)
    assert worst < eps

    round_trip = 0.0
    for _ in range(3):
        mlp = _random_deepsets_mlp(rng)
        kan = mlp_to_fskan(mlp, (-1.0, 1.0))
        back, _ = fskan_to_mlp(kan, (-1.0, 1.0), eps, rng=rng)
        first = mlp.blocks[0].layer
        x = rng.uniform(-1, 1, (10_000, first.n_in, first.d_in))
        round_trip = max(round_trip, float(np.abs(back.forward(x) - mlp.forward(x)).max()))
    record_property("round_trip_error", f"{round_trip:.2e}")
    assert round_trip < eps


# 6 ------------------------------------------------------------------------------------


def _brute_stabilizer_count(group, q):
    stab = [g for g in group_elements(group) if g.mapping[q] == q]
    return len({frozenset(g.mapping[i] for g in stab) for i in range(group.degree)})


def test_criterion_6_efficient_op_count(record_property):
    for n, m in itertools.product(range(2, 6), repeat=2):
        layer = EfficientFSKALayer(DirectProduct(Symmetric(n), Symmetric(m)), 1, 1)
        assert layer.broadcast_units() == n + 3
    checked = 0
    for n in range(1, 7):
        for g in (Symmetric(n), Cyclic(n)):
            for q in range(n):
                assert stabilizer_orbit_count(g, q) == _brute_stabilizer_count(g, q)
                checked += 1
    for text in ("prod(S(2),S(3))", "prod(S(3),C(2))", "prod(S(2),C(3))"):
        g = parse_group(text)
        layer = EfficientFSKALayer(g, 1, 1)
        counts = [stabilizer_orbit_count(g, q) for q in range(g.degree)]
        assert counts == [_brute_stabilizer_count(g, q) for q in range(g.degree)]
        assert layer.applications_per_slot().tolist() == counts
        checked += g.degree
    record_property("stabilizers_checked", checked)


# 7 ------------------------------------------------------------------------------------


def _network_fd_error(net, rng, batch=4, h=1e-6, checks=5):
    d_in = net.blocks[0].layer.d_in
    x = rng.uniform(-1, 1, (batch, net.group.degree, d_in))
    out, cache = net.forward_cache(x, train=True, update_stats=False)
    g = rng.normal(size=out.shape)
    grads, gx = net.backward(cache, g, with_input=True)

    def f(xx):
        return float(np.sum(g * net.forward_cache(xx, train=True, update_stats=False)[0]))

    worst = 0.0
    for name, p in net.params().items():
        for _ in range(checks):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            old = p[idx]
            p[idx] = old + h
            fp = f(x)
            p[idx] = old - h
            fm = f(x)
            p[idx] = old
            fd = (fp - fm) / (2 * h)
            a = grads[name][idx]
            worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-2))
    for _ in range(checks):
        idx = tuple(int(rng.integers(0, s)) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (f(xp) - f(xm)) / (2 * h)
        worst = max(worst, abs(fd - gx[idx]) / max(abs(fd), abs(gx[idx]), 1e-2))
    return worst


def test_criterion_7_gradient_correctness(record_property):
    rng = np.random.default_rng(7)
    groups = ["S(3)", "C(4)", "prod(S(2),C(2))", "prod(S(2),S(2))", "S(4)"]
    worst = {}
    for kind in ("fs", "efficient", "ps-mlp"):
        worst[kind] = 0.0
        for trial in range(5):
            g = parse_group(groups[trial])
            agg = ("sum", "mean")[trial % 2]
            if kind == "ps-mlp":
                net = build_ps_mlp(g, 2, [3, 2], 2, aggregation=agg, rng=rng)
                for b in net.blocks:
                    b.layer.bank.b[...] = rng.normal(0, 0.3, b.layer.bank.b.shape)
            else:
                net = build_fskan(g, 2, [3, 2], 2, layer_kind=kind, aggregation=agg, rng=rng)
                for b in net.blocks:
                    randomize_bank(b.layer.bank, rng, 0.5)
            worst[kind] = max(worst[kind], _network_fd_error(net, rng))
    for kind, w in worst.items():
        record_property(kind, f"{w:.1e}")
    assert max(worst.values()) < 1e-4


# 8 ------------------------------------------------------------------------------------

SIGNAL_GROUP = "prod(S(5),C(20))"


def _signal_model(kind, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    if kind == "mlp":
        return build_ps_mlp(SIGNAL_GROUP, 1, [32, 32], 3, rng=rng)
    spline = SplineConfig(grid_range=(-3.0, 3.0), weight_init="uniform")
    return build_fskan(SIGNAL_GROUP, 1, [8, 8], 3, layer_kind="efficient", spline=spline,
                       invariant_spline=spline, head_spline=spline, rng=rng)


def _signal_accuracy(kind, size, seed, steps=300):
    data = gen_signals(5, 20, 1000, 0.3, seed=seed)
    train, val, test = (data.subset(slice(0, size)), data.subset(slice(600, 700)),
                        data.subset(slice(700, 1000)))
    net = _signal_model(kind, seed)
    batch = min(32, size)
    # same optimizer step budget at every size; lr and eta chosen on validation seeds
    cfg = TrainConfig(epochs=max(1, steps * batch // size), batch_size=batch,
                      learning_rate=1e-2, reg_coeff=0.0, seed=seed)
    train_run(net, (train.x, train.y), (val.x, val.y), cfg)
    return evaluate(net, test.x, test.y)["accuracy"]


def test_criterion_8_data_efficiency(record_property):
    t0 = time.perf_counter()
    p_kan = _signal_model("fskan", 0).num_params()
    p_mlp = _signal_model("mlp", 0).num_params()
    record_property("params", f"{p_kan}/{p_mlp}")
    assert abs(p_kan - p_mlp) <= 0.1 * max(p_kan, p_mlp)
    acc = {}
    for size in (60, 120, 600):
        for kind in ("fskan", "mlp"):
            acc[kind, size] = float(np.mean([_signal_accuracy(kind, size, s) for s in range(5)]))
        record_property(f"n{size}", f"{acc['fskan', size]:.3f}/{acc['mlp', size]:.3f}")
    elapsed = time.perf_counter() - t0
    record_property("seconds", round(elapsed))
    assert elapsed < 20 * 60
    assert acc["fskan", 60] >= acc["mlp", 60]
    assert acc["fskan", 120] >= acc["mlp", 120]
    assert acc["fskan", 600] >= 0.85 and acc["mlp", 600] >= 0.85


# 9 ------------------------------------------------------------------------------------


def test_criterion_9_variable_size(record_property):
    data = gen_set_classification(5, 120, seed=9)
    rng = np.random.default_rng(9)
    for agg in ("sum", "mean"):
        net = build_fskan("S(5)", 2, [4, 4], 3, aggregation=agg,
                          rng=np.random.Generator(np.random.Philox(9)))
        train_run(net, (data.x[:90], data.y[:90]), (data.x[90:], data.y[90:]),
                  TrainConfig(epochs=5, batch_size=30, learning_rate=1e-2, seed=9))
        big = gen_set_classification(8, 20, seed=10)
        y = net.forward(big.x)
        assert y.shape == (20, 3) and np.all(np.isfinite(y))
        worst = 0.0
        for _ in range(20):
            s = Symmetric(8).random_element(rng)
            worst = max(worst, float(np.abs(net.forward(act(s, big.x, 1)) - y).max()))
        record_property(f"{agg}_invariance_n8", f"{worst:.1e}")
        assert worst < 1e-6
    # mean aggregation: constant inputs give the same output at every size
    drift = 0.0
    for c in rng.uniform(-1, 1, (5, 2)):
        outs = [net.forward(np.broadcast_to(c, (1, n, 2)).copy()) for n in (5, 8, 11)]
        drift = max(drift, max(float(np.abs(o - outs[0]).max()) for o in outs))
    record_property("mean_size_drift", f"{drift:.1e}")
    assert drift < 1e-9


# 10 -----------------------------------------------------------------------------------


def test_criterion_10_symbolic_formula(tmp_path, record_property):
    t0 = time.perf_counter()
    data = gen_formula("gauss_sum_sq", 3, 1200, seed=0)
    train, val = data.split([1000, 200])
    grid = SplineConfig(grid_range=(-3.0, 3.0))
    net = build_fskan("S(3)", 1, [4, 4], 1, invariant_spline=grid, head_spline=grid,
                      rng=np.random.Generator(np.random.Philox(0)))
    cfg = TrainConfig(epochs=100, batch_size=32, learning_rate=1e-2, reg_coeff=0.0,
                      weight_decay=0.0, task="regression")
    train_run(net, (train.x, train.y), (val.x, val.y), cfg)
    train_mse = evaluate(net, train.x, train.y, "regression")["loss"]
    val_mse = evaluate(net, val.x, val.y, "regression")["loss"]
    record_property("train_mse", f"{train_mse:.2e}")
    record_property("val_mse", f"{val_mse:.2e}")
    assert train_mse < 1e-3

    model = tmp_path / "model.json"
    d = net.to_dict()
    d["meta"] = {"task": "regression"}
    model.write_text(json.dumps(d))
    out = tmp_path / "splines.csv"
    assert cli_main(["export-splines", "--model", str(model), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    functions = {(r["layer"], r["orbit"], r["out"], r["in"]) for r in rows}
    # one stored function per (orbit, channel pair) in every layer, 256 samples each
    expected = sum(b.layer.bank.coeffs[..., 0].size for b in net.blocks)
    assert len(functions) == expected and len(rows) == 256 * expected
    orbits = {}
    for r in rows:
        orbits.setdefault(int(r["layer"]), set()).add(int(r["orbit"]))
    assert [len(orbits[b]) for b in sorted(orbits)] == [b.layer.bank.H for b in net.blocks]
    # every position pair of the first layer reads the exported function of its orbit
    first = net.blocks[0].layer
    assert first.num_orbits == 2
    curves = {}
    for r in rows:
        if r["layer"] == "0":
            curves.setdefault((int(r["orbit"]), int(r["out"])), []).append(
                (float(r["x"]), float(r["value"])))
    for q, p in itertools.product(range(3), repeat=2):
        for o in range(first.d_out):
            xs, vs = np.array(curves[int(first.table.ids[q, p]), o]).T
            assert np.abs(first.pair_function(q, p, o, 0)(xs) - vs).max() < 1e-12
    record_property("exported_functions", len(functions))
    elapsed = time.perf_counter() - t0
    record_property("seconds", round(elapsed, 1))
    assert elapsed < 120
