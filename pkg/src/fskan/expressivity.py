"""Parameter-sharing MLPs and exact/approximate conversions to and from FS-KANs.

* :func:`mlp_to_fskan` realises every affine layer of a parameter-sharing MLP by
  one FS-KA layer of degree-1 splines and every ReLU by a diagonal FS-KA layer,
  which is exact on a bounded domain.
* :func:`fskan_to_mlp` replaces every shared univariate function by its
  piecewise-linear interpolant, written as a one-hidden-layer ReLU network whose
  weights are tied exactly as the functions are.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .layers import (
    EfficientFSKALayer,
    FSInvariantLayer,
    FSKALayer,
    KABank,
    LayerError,
    _as_batch,
)
from .network import LAYER_REGISTRY, Block, FSKANetwork, Network, NormState
from .permgroup import GroupSpec, OrbitTable, Trivial, enumerate_orbits, parse_group
from .spline import SplineConfig, base_activation, basis


class ConversionError(RuntimeError):
    """A conversion could not meet its accuracy target."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


# ---------------------------------------------------------------------------
# parameter-sharing linear layers
# ---------------------------------------------------------------------------


class LinearBank:
    """``H`` affine sub-layers ``x -> W[h] x + b[h]``."""

    def __init__(self, H: int, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 std: float | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.H, self.d_in, self.d_out = H, d_in, d_out
        std = 1.0 / np.sqrt(d_in) if std is None else std
        self.W = rng.normal(0.0, std, (H, d_out, d_in))
        self.b = np.zeros((H, d_out))

    def params(self):
        return {"W": self.W, "b": self.b}

    def num_params(self):
        return self.W.size + self.b.size

    def zero_grads(self):
        return {"W": np.zeros_like(self.W), "b": np.zeros_like(self.b)}

    def forward(self, x2, hs=None):
        hs = np.arange(self.H) if hs is None else np.atleast_1d(np.asarray(hs))
        Y = x2 @ self.W[hs].reshape(-1, self.d_in).T + self.b[hs].reshape(-1)
        return Y.reshape(len(x2), len(hs), self.d_out), (hs, x2)

    def backward(self, cache, gY, grads=None):
        hs, x2 = cache
        if grads is None:
            grads = self.zero_grads()
        gYf = gY.reshape(len(x2), -1)
        np.add.at(grads["W"], hs, (gYf.T @ x2).reshape(len(hs), self.d_out, self.d_in))
        np.add.at(grads["b"], hs, gYf.sum(axis=0).reshape(len(hs), self.d_out))
        return gYf @ self.W[hs].reshape(-1, self.d_in)

    def to_dict(self):
        return {"H": self.H, "d_in": self.d_in, "d_out": self.d_out,
                "W": self.W.ravel().tolist(), "b": self.b.ravel().tolist()}

    @classmethod
    def from_dict(cls, d):
        bank = cls(int(d["H"]), int(d["d_in"]), int(d["d_out"]))
        bank.W = np.array(d["W"], dtype=float).reshape(bank.W.shape)
        bank.b = np.array(d["b"], dtype=float).reshape(bank.b.shape)
        return bank


class EquivariantLinear(FSKALayer):
    """Weight-tied linear layer: ``out[q] = sum_p (W[h(q,p)] x[p] + b[h(q,p)])``.

    Each pair's affine sub-layer carries its own share of the bias, so the
    effective bias at ``q`` is the sum of the orbit biases over the row.
    """

    kind = "linear"
    bank_class = LinearBank

    def __init__(self, group, d_in, d_out, k_in=1, k_out=1, aggregation="sum", rng=None,
                 std=None, *, bank=None, table=None, orbit_to_bank=None, **_):
        if isinstance(group, str):
            group = parse_group(group)
        table = table if table is not None else enumerate_orbits(group, k_out, k_in)
        if bank is None:
            bank = LinearBank(table.num_orbits, d_in, d_out, rng, std)
        super().__init__(group, d_in, d_out, k_in, k_out, aggregation, bank=bank, table=table,
                         orbit_to_bank=orbit_to_bank)

    # dense path: one matmul with the materialized weight matrix when it is small
    DENSE_LIMIT = 4_000_000

    def _pair_ops(self):
        """Sparse ``(P_out * P_in, H)`` pair-to-orbit map carrying the aggregation weights."""
        if getattr(self, "_pairs", None) is None:
            t = self.table
            w = _pair_weights(self).ravel()
            cols = self.orbit_to_bank[t.ids].ravel()
            self._pairs = sp.csr_matrix((w, (np.arange(w.size), cols)),
                                        shape=(w.size, self.bank.H))
            self._pairsT = self._pairs.T.tocsr()
        return self._pairs, self._pairsT

    def forward_cache(self, x):
        xb, single = _as_batch(np.asarray(x, dtype=float))
        layer = self._resolve(xb.shape[1])
        t = layer.table
        if t.n_out * t.n_in * self.d_out * self.d_in > self.DENSE_LIMIT:
            return super().forward_cache(x)
        if xb.shape[2] != self.d_in:
            raise LayerError(f"expected {self.d_in} input channels, got {xb.shape[2]}")
        M, _ = layer._pair_ops()
        P_out, P_in = t.n_out, t.n_in
        Wf = (M @ self.bank.W.reshape(self.bank.H, -1)).reshape(P_out, P_in, self.d_out, self.d_in)
        Wf = Wf.transpose(0, 2, 1, 3).reshape(P_out * self.d_out, P_in * self.d_in)
        bias = (M @ self.bank.b).reshape(P_out, P_in, self.d_out).sum(axis=1)
        b = xb.shape[0]
        xf = xb.reshape(b, -1)
        out = (xf @ Wf.T + bias.ravel()).reshape(b, P_out, self.d_out)
        cache = ("dense", layer, xf, Wf, single)
        return (out[0] if single else out), cache

    def backward(self, cache, gout):
        if not (isinstance(cache[0], str) and cache[0] == "dense"):
            return super().backward(cache, gout)
        _, layer, xf, Wf, single = cache
        gout = np.asarray(gout, dtype=float)
        if single:
            gout = gout[None]
        t = layer.table
        P_out, P_in = t.n_out, t.n_in
        b = xf.shape[0]
        if gout.shape != (b, P_out, self.d_out):
            raise LayerError(f"upstream gradient has shape {gout.shape}")
        _, MT = layer._pair_ops()
        gf = gout.reshape(b, -1)
        gW = (gf.T @ xf).reshape(P_out, self.d_out, P_in, self.d_in).transpose(0, 2, 1, 3)
        grads = {
            "W": (MT @ gW.reshape(P_out * P_in, -1)).reshape(self.bank.W.shape),
            "b": MT @ np.repeat(gout.sum(axis=0), P_in, axis=0),
        }
        gx = (gf @ Wf).reshape(b, P_in, self.d_in)
        return (gx[0] if single else gx), grads

    def materialize(self):
        """Dense ``(P_out, P_in, d_out, d_in)`` weights and ``(P_out, P_in, d_out)``
        per-pair bias shares (the bias at ``q`` is their sum over ``p``)."""
        w = _pair_weights(self)
        idx = self.orbit_to_bank[self.table.ids]
        W = self.bank.W[idx] * w[..., None, None]
        bias = self.bank.b[idx] * w[..., None]
        return W, bias


LAYER_REGISTRY["linear"] = EquivariantLinear


class ParamSharingMLP(Network):
    family = "ps-mlp"


def mlp_forward(mlp: ParamSharingMLP, x):
    return mlp.forward(x)


def build_ps_mlp(group: GroupSpec | str, d_in: int, widths, d_out: int, *,
                 aggregation: str = "sum", norm: bool = True, invariant: bool = True,
                 rng: np.random.Generator | None = None) -> ParamSharingMLP:
    """Equivariant linear+ReLU blocks, an invariant linear+ReLU block and a linear head."""
    if isinstance(group, str):
        group = parse_group(group)
    rng = rng if rng is not None else np.random.default_rng(0)
    n = group.degree
    widths = list(widths)
    blocks, d = [], d_in
    fan = n if aggregation == "sum" else 1
    eq_widths = widths[:-1] if invariant else widths
    for w in eq_widths:
        lin = EquivariantLinear(group, d, w, aggregation=aggregation, rng=rng,
                                std=np.sqrt(2.0 / (d * fan)))
        blocks.append(Block(lin, NormState(w) if norm else None, "relu"))
        d = w
    if invariant:
        w = widths[-1]
        lin = EquivariantLinear(group, d, w, k_out=0, aggregation=aggregation, rng=rng,
                                std=np.sqrt(2.0 / (d * fan)))
        blocks.append(Block(lin, NormState(w) if norm else None, "relu"))
        blocks.append(Block(EquivariantLinear(Trivial(1), w, d_out, 0, 0, rng=rng,
                                              std=np.sqrt(1.0 / w))))
    else:
        blocks.append(Block(EquivariantLinear(group, d, d_out, aggregation=aggregation, rng=rng,
                                              std=np.sqrt(1.0 / (d * fan)))))
    return ParamSharingMLP(group, blocks, invariant)


def check_weight_tying(layer: EquivariantLinear, group: GroupSpec | None = None,
                       trials: int = 20, rng: np.random.Generator | None = None) -> bool:
    """``W[q,p] == W[sigma q, sigma p]`` exactly for sampled group elements."""
    from .permgroup import position_permutation

    group = group or layer.group
    rng = rng if rng is not None else np.random.default_rng(0)
    W, bias = layer.materialize()
    for _ in range(trials):
        s = group.random_element(rng)
        po = position_permutation(s, layer.k_out) if layer.k_out else np.zeros(1, dtype=int)
        pi = position_permutation(s, layer.k_in) if layer.k_in else np.zeros(1, dtype=int)
        if not (np.array_equal(W[np.ix_(po, pi)], W) and np.array_equal(bias[np.ix_(po, pi)], bias)):
            return False
    return True


# ---------------------------------------------------------------------------
# interval helpers
# ---------------------------------------------------------------------------


def _domain_arrays(domain, d: int):
    lo, hi = domain
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (d,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (d,)).copy()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ConversionError("the input domain must be bounded")
    if np.any(hi < lo):
        raise ConversionError("empty input domain")
    return lo, hi


def _norm_affine(norm: NormState | None, d: int):
    if norm is None:
        return np.ones(d), np.zeros(d)
    s = norm.gamma / np.sqrt(norm.running_var + norm.eps)
    return s, norm.beta - s * norm.running_mean


def _after_block(low, high, norm, activation):
    s, t = _norm_affine(norm, len(low))
    low, high = np.minimum(s * low, s * high) + t, np.maximum(s * low, s * high) + t
    if activation == "relu":
        low, high = np.maximum(low, 0.0), np.maximum(high, 0.0)
    return low, high


def _linear_range(layer: EquivariantLinear, lo, hi):
    W, bias = layer.materialize()
    a, b = W * lo, W * hi
    low = np.minimum(a, b).sum(axis=(1, 3)) + bias.sum(axis=1)
    high = np.maximum(a, b).sum(axis=(1, 3)) + bias.sum(axis=1)
    return low.min(axis=0), high.max(axis=0)


def _pair_weights(layer: FSKALayer) -> np.ndarray:
    t = layer.table
    if layer.aggregation == "mean":
        counts = t.counts()
        return 1.0 / counts[np.arange(t.n_out)[:, None], t.ids]
    return np.ones(t.ids.shape)


def _fs_range(layer: FSKALayer, lo, hi):
    flo, fhi = layer.bank.range_bounds(lo, hi)
    idx = layer.orbit_to_bank[layer.table.ids]
    w = _pair_weights(layer)
    low = (flo.sum(axis=2)[idx] * w[..., None]).sum(axis=1)
    high = (fhi.sum(axis=2)[idx] * w[..., None]).sum(axis=1)
    return low.min(axis=0), high.max(axis=0)


def _dense_membership(layer: EfficientFSKALayer):
    out = []
    for rows, uniq, inv in layer.agg:
        M = np.zeros((layer.n_out, layer.n_in))
        if len(rows):
            M[rows] = uniq[inv]
        out.append((rows, M))
    return out


def _agg_intervals(M, rows, lo, hi):
    # weights are non-negative, so row q's aggregate lies in [rs_q * lo, rs_q * hi]
    rs = M[rows].sum(axis=1)
    return (rs[:, None] * lo).min(axis=0), (rs[:, None] * hi).max(axis=0)


def _efficient_range(layer: EfficientFSKALayer, lo, hi):
    low = np.zeros((layer.n_out, layer.d_out))
    high = np.zeros((layer.n_out, layer.d_out))
    for h, (rows, M) in enumerate(_dense_membership(layer)):
        if len(rows) == 0:
            continue
        alo, ahi = _agg_intervals(M, rows, lo, hi)
        flo, fhi = layer.bank.range_bounds(alo, ahi)
        b = layer.orbit_to_bank[h]
        low[rows] += flo[b].sum(axis=1)
        high[rows] += fhi[b].sum(axis=1)
    return low.min(axis=0), high.max(axis=0)


# ---------------------------------------------------------------------------
# MLP -> FS-KAN
# ---------------------------------------------------------------------------


def _pow2_cover(v: float) -> float:
    return float(2.0 ** np.ceil(np.log2(max(v, 1.0))))


def mlp_to_fskan(mlp: ParamSharingMLP, domain) -> FSKANetwork:
    """Exact FS-KAN realisation of a parameter-sharing ReLU MLP on a bounded domain."""
    first = mlp.blocks[0].layer
    lo, hi = _domain_arrays(domain, first.d_in)
    blocks = []
    for block in mlp.blocks:
        lin = block.layer
        if not isinstance(lin, EquivariantLinear):
            raise ConversionError(f"unsupported layer {type(lin).__name__}")
        if block.activation not in (None, "relu"):
            raise ConversionError(f"unsupported activation {block.activation!r}")
        W, b = lin.bank.W.copy(), lin.bank.b.copy()
        s, t = _norm_affine(block.norm, lin.d_out)
        W *= s[None, :, None]
        b *= s[None, :]
        if block.norm is not None:
            b += _bias_share(lin, t)[None, :]
        L, U = float(lo.min()), float(hi.max())
        if U - L < 1e-12:
            L, U = L - 0.5, U + 0.5
        cfg = SplineConfig(degree=1, num_intervals=1, grid_range=(L, U), base_kind="none",
                           coeff_std=0.0, w_base_init=0.0, w_spline_init=1.0)
        bank = KABank(lin.bank.H, lin.d_in, lin.d_out, cfg)
        share = b[:, :, None] / lin.d_in
        bank.coeffs = np.stack([W * L + share, W * U + share], axis=-1)
        cls = FSInvariantLayer if (lin.k_out == 0 and lin.k_in > 0) else FSKALayer
        affine = cls(lin.group, lin.d_in, lin.d_out, lin.k_in, lin.k_out, lin.aggregation,
                     bank=bank, table=lin.table, orbit_to_bank=lin.orbit_to_bank.copy())
        blocks.append(Block(affine))
        folded = EquivariantLinear(lin.group, lin.d_in, lin.d_out, lin.k_in, lin.k_out,
                                   lin.aggregation, table=lin.table,
                                   orbit_to_bank=lin.orbit_to_bank, bank=_linear_bank(W, b))
        lo, hi = _linear_range(folded, lo, hi)
        if block.activation == "relu":
            blocks.append(Block(_relu_layer(lin.group, lin.d_out, lin.k_out,
                                            float(max(np.abs(lo).max(), np.abs(hi).max())))))
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
    return FSKANetwork(mlp.group, blocks, mlp.invariant)


def _linear_bank(W, b):
    bank = LinearBank(W.shape[0], W.shape[2], W.shape[1])
    bank.W, bank.b = W, b
    return bank


def _bias_share(lin: EquivariantLinear, t: np.ndarray) -> np.ndarray:
    """Per-orbit bias increment that adds ``t`` to every output position."""
    if lin.aggregation == "sum":
        return t / lin.n_in
    meets = (lin.table.counts() > 0).sum(axis=1)
    if np.any(meets != meets[0]):
        raise ConversionError("cannot fold a norm shift into a mean layer with uneven rows")
    return t / meets[0]


def _relu_layer(group, d: int, k: int, bound: float) -> FSKALayer:
    R = _pow2_cover(bound)
    cfg = SplineConfig(degree=1, num_intervals=2, grid_range=(-R, R), base_kind="none",
                       coeff_std=0.0, w_base_init=0.0, w_spline_init=1.0)
    table = enumerate_orbits(group, k, k)
    bank = KABank(table.num_orbits, d, d, cfg)
    for h in table.diagonal_orbits():
        for o in range(d):
            bank.coeffs[h, o, o] = [0.0, 0.0, R]
    return FSKALayer(group, d, d, k, k, "sum", bank=bank, table=table)


# ---------------------------------------------------------------------------
# FS-KAN -> MLP
# ---------------------------------------------------------------------------


@dataclass
class ConversionReport:
    achieved_error: float
    eps: float
    nodes: list = field(default_factory=list)
    attempts: int = 1


def _function_values(bank: KABank, i: int, xs: np.ndarray) -> np.ndarray:
    """Values of every function reading channel ``i``: shape ``(H, d_out, len(xs))``."""
    B = basis(xs, bank.knots, bank.degree)
    base, _ = base_activation(bank.base_kind, xs)
    spl = np.einsum("hok,tk->hot", bank.coeffs[:, :, i], B)
    return bank.w_spline[:, :, i, None] * spl + bank.w_base[:, :, i, None] * base


def _interp(nodes: np.ndarray, vals: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolant through ``(nodes, vals[..., j])`` evaluated at ``xs``."""
    j = np.clip(np.searchsorted(nodes, xs, side="right") - 1, 0, len(nodes) - 2)
    w = (xs - nodes[j]) / (nodes[j + 1] - nodes[j])
    return vals[..., j] * (1.0 - w) + vals[..., j + 1] * w


def _fit_nodes(values_fn, lo: float, hi: float, tol: float, extra_knots, budget: int,
               rng: np.random.Generator):
    """Smallest doubling grid whose interpolants meet ``tol`` on sampled points."""
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    inner = np.asarray([k for k in extra_knots if lo < k < hi], dtype=float)
    M = 8
    worst = np.inf
    while M <= budget:
        nodes = np.unique(np.concatenate([np.linspace(lo, hi, M + 1), inner]))
        mids = 0.5 * (nodes[:-1] + nodes[1:])
        quarters = np.concatenate([0.75 * nodes[:-1] + 0.25 * nodes[1:],
                                   0.25 * nodes[:-1] + 0.75 * nodes[1:]])
        test = np.concatenate([mids, quarters, rng.uniform(lo, hi, 256)])
        vn = values_fn(nodes)
        vt = values_fn(test)
        approx = _interp(nodes, vn, test)
        worst = float(np.abs(approx - vt).max()) if vt.size else 0.0
        if worst < tol:
            return nodes, vn, worst
        M *= 2
    raise ConversionError(
        f"interpolation grid budget of {budget} nodes exhausted; achieved error {worst:.3g} "
        f"against target {tol:.3g}", worst)


def _relu_code(nodes: np.ndarray, vals: np.ndarray):
    """ReLU expansion of the interpolant through ``(nodes, vals[..., j])``.

    Units are ``relu(x - nodes[j])`` for ``j < M`` followed by ``relu(nodes[0] - x)``.
    Returns unit weights ``(..., M + 1)`` and the constant ``vals[..., 0]``.
    """
    slopes = np.diff(vals, axis=-1) / np.diff(nodes)
    a = np.concatenate([slopes[..., :1], np.diff(slopes, axis=-1), -slopes[..., :1]], axis=-1)
    return a, vals[..., 0]


def _hidden_linear(group, table_k: OrbitTable, d_in: int, grids: list[np.ndarray],
                   weights: np.ndarray | None = None, k: int = 1) -> EquivariantLinear:
    """First layer: ``relu(x_i - t)`` and ``relu(t0 - x_i)`` units for each node grid.

    ``grids`` holds ``(channel, nodes)`` pairs.  Without ``weights`` the units read
    their own position only; otherwise ``weights[g, u]`` scales the input of
    unit group ``u`` from pair-orbit ``g``.
    """
    D = sum(len(nodes) for _, nodes in grids)
    bank = LinearBank(table_k.num_orbits, d_in, D)
    bank.W[:] = 0.0
    diag = table_k.diagonal_orbits()
    col = 0
    for u, (i, nodes) in enumerate(grids):
        M = len(nodes) - 1
        sign = np.concatenate([np.ones(M), [-1.0]])
        bias = np.concatenate([-nodes[:M], [nodes[0]]])
        if weights is None:
            for g in diag:
                bank.W[g, col:col + M + 1, i] = sign
        else:
            for g in range(table_k.num_orbits):
                bank.W[g, col:col + M + 1, i] = sign * weights[g, u]
        for g in diag:
            bank.b[g, col:col + M + 1] = bias
        col += M + 1
    return EquivariantLinear(group, d_in, D, k, k, "sum", table=table_k, bank=bank)


def _convert_fs(layer: FSKALayer, lo, hi, tol, budget, rng):
    bank = layer.bank
    summands = layer.n_in * layer.d_in
    ftol = tol / max(summands, 1)
    extra = bank.knots if bank.degree == 1 else []
    grids, codes, consts = [], [], []
    for i in range(layer.d_in):
        nodes, vn, _ = _fit_nodes(lambda xs: _function_values(bank, i, xs), lo[i], hi[i],
                                  ftol, extra, budget, rng)
        grids.append((i, nodes))
        a, c = _relu_code(nodes, vn)
        codes.append(a)
        consts.append(c)
    group = layer.group
    table_k = enumerate_orbits(group, layer.k_in, layer.k_in)
    first = _hidden_linear(group, table_k, layer.d_in, grids, k=layer.k_in)
    W2 = np.concatenate(codes, axis=-1)  # (H, d_out, D)
    b2 = np.sum(consts, axis=0)  # (H, d_out)
    second = EquivariantLinear(group, first.d_out, layer.d_out, layer.k_in, layer.k_out,
                               layer.aggregation, table=layer.table,
                               orbit_to_bank=layer.orbit_to_bank, bank=_linear_bank(W2, b2))
    return first, second, [len(n) for _, n in grids]


def _convert_efficient(layer: EfficientFSKALayer, lo, hi, tol, budget, rng):
    bank = layer.bank
    H, d_in = layer.num_orbits, layer.d_in
    ftol = tol / max(H * d_in, 1)
    extra = bank.knots if bank.degree == 1 else []
    members = _dense_membership(layer)
    table = layer.table
    reps = [divmod(int(np.flatnonzero(table.ids.ravel() == g)[0]), table.n_in)
            for g in range(table.num_orbits)]
    grids, weights_cols, codes, consts, used = [], [], [], [], []
    for h, (rows, M) in enumerate(members):
        if len(rows) == 0:
            continue
        for g, (q, p) in enumerate(reps):
            vals = M[table.ids == g]
            if not np.all(vals == vals[0]):
                raise ConversionError("aggregation weights are not constant on a pair orbit")
        m_col = np.array([M[q, p] for q, p in reps])
        alo, ahi = _agg_intervals(M, rows, lo, hi)
        b = int(layer.orbit_to_bank[h])
        for i in range(d_in):
            nodes, vn, _ = _fit_nodes(
                lambda xs: _function_values(bank, i, xs)[b], alo[i], ahi[i], ftol, extra,
                budget, rng)
            grids.append((i, nodes))
            weights_cols.append(m_col)
            a, c = _relu_code(nodes, vn)
            codes.append(a)
            consts.append(c)
            used.append(h)
    group = layer.group
    first = _hidden_linear(group, table, d_in, grids, weights=np.stack(weights_cols, axis=1),
                           k=layer.k_in)
    # second layer is pointwise; orbit h contributes at q only if it meets row q
    D = first.d_out
    W2 = np.zeros((table.num_orbits, layer.d_out, D))
    b2 = np.zeros((table.num_orbits, layer.d_out))
    row_of = {h: set(rows.tolist()) for h, (rows, _) in enumerate(members)}
    col = 0
    for u, h in enumerate(used):
        width = codes[u].shape[-1]
        for g in table.diagonal_orbits():
            q = reps[g][0]
            if q in row_of[h]:
                W2[g, :, col:col + width] = codes[u]
                b2[g] += consts[u]
        col += width
    second = EquivariantLinear(group, D, layer.d_out, layer.k_in, layer.k_out, "sum",
                               table=table, bank=_linear_bank(W2, b2))
    return first, second, [len(n) for _, n in grids]


def fskan_to_mlp(net: Network, domain, eps: float, budget: int = 2**16,
                 samples: int = 10_000, max_halvings: int = 8,
                 rng: np.random.Generator | None = None):
    """Parameter-sharing ReLU MLP within ``eps`` (sup norm, sampled) of ``net``.

    Returns ``(mlp, report)``.  Every FS layer becomes two linear layers: a
    pointwise layer of ReLU hinge units and a tied layer combining them.  Each
    interpolant meets ``eps_layer / summands``; if the composed network misses
    ``eps`` on the samples, the per-layer budget is halved and the conversion
    repeated.
    """
    if eps <= 0:
        raise ConversionError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    first = net.blocks[0].layer
    lo0, hi0 = _domain_arrays(domain, first.d_in)
    xs = rng.uniform(lo0, hi0, (samples, first.n_in, first.d_in))
    target = net.forward(xs)
    per_layer = eps / len(net.blocks)
    achieved = np.inf
    for attempt in range(1, max_halvings + 2):
        blocks, nodes = [], []
        lo, hi = lo0.copy(), hi0.copy()
        for block in net.blocks:
            layer = block.layer
            s, _ = _norm_affine(block.norm, layer.d_out)
            tol = per_layer / max(np.abs(s).max(), 1e-12)
            if isinstance(layer, EfficientFSKALayer):
                a, b, nn = _convert_efficient(layer, lo, hi, tol, budget, rng)
                low, high = _efficient_range(layer, lo, hi)
            elif isinstance(layer, FSKALayer) and not isinstance(layer, EquivariantLinear):
                a, b, nn = _convert_fs(layer, lo, hi, tol, budget, rng)
                low, high = _fs_range(layer, lo, hi)
            else:
                raise ConversionError(f"unsupported layer {type(layer).__name__}")
            blocks.append(Block(a, None, "relu"))
            blocks.append(Block(b, copy.deepcopy(block.norm), block.activation))
            nodes.append(nn)
            lo, hi = _after_block(low, high, block.norm, block.activation)
        mlp = ParamSharingMLP(net.group, blocks, net.invariant)
        achieved = float(np.abs(mlp.forward(xs) - target).max())
        if achieved < eps:
            return mlp, ConversionReport(achieved, eps, nodes, attempt)
        per_layer /= 2.0
    raise ConversionError(f"could not reach eps={eps:g}; achieved {achieved:.3g}", achieved)
