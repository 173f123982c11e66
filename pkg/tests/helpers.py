"""Reference implementations and builders shared by the test modules."""

import numpy as np

from fskan.layers import FSKALayer, KABank, unconstrained_layer
from fskan.permgroup import Trivial, enumerate_orbits


def randomize_bank(bank, rng, scale=1.0):
    bank.coeffs[...] = rng.normal(0.0, 0.5 * scale, bank.coeffs.shape)
    bank.w_base[...] = rng.normal(0.0, scale, bank.w_base.shape)
    bank.w_spline[...] = rng.normal(1.0, 0.3 * scale, bank.w_spline.shape)
    return bank


def naive_forward(layer, x):
    """Unshared evaluation: materialize every pair function and sum (sum aggregation)."""
    x = np.asarray(x, dtype=float)
    ids = layer.materialize()
    P_out, P_in = ids.shape
    out = np.zeros((x.shape[0], P_out, layer.d_out))
    for q in range(P_out):
        for p in range(P_in):
            h = int(ids[q, p])
            for o in range(layer.d_out):
                for i in range(layer.d_in):
                    out[:, q, o] += layer.bank.function(h, o, i)(x[:, p, i])
    return out


def unshared_copy(layer):
    """Trivial-group layer whose pair functions are copies of ``layer``'s."""
    n = layer.group.degree
    free = unconstrained_layer(n, layer.d_in, layer.d_out, layer.k_in, layer.k_out,
                               spline=layer.bank.config)
    src = layer.materialize()
    for q, p in np.ndindex(src.shape):
        h_free = int(free.table.ids[q, p])
        h_src = int(src[q, p])
        free.bank.coeffs[h_free] = layer.bank.coeffs[h_src]
        free.bank.w_base[h_free] = layer.bank.w_base[h_src]
        free.bank.w_spline[h_free] = layer.bank.w_spline[h_src]
    return free


def perturbed_fs_layer(fs, rng, out_orbit_alpha=None):
    """Unconstrained copy of ``fs`` with constant offsets ``C[q, p]`` added.

    Offsets are random but each row sums to ``alpha`` of its output orbit, so the
    result is still equivariant.  Returns the layer and the row sums ``alpha[q, o]``.
    """
    free = unshared_copy(fs)
    P_out, P_in = fs.table.n_out, fs.table.n_in
    out_ids = enumerate_orbits(fs.group, fs.k_out, 0).ids[:, 0]
    n_out_orbits = int(out_ids.max()) + 1
    if out_orbit_alpha is None:
        out_orbit_alpha = rng.normal(0.0, 1.0, (n_out_orbits, fs.d_out))
    alpha = out_orbit_alpha[out_ids]
    C = rng.normal(0.0, 1.0, (P_out, P_in, fs.d_out))
    C += (alpha - C.sum(axis=1))[:, None, :] / P_in
    for q, p in np.ndindex(P_out, P_in):
        h = int(free.table.ids[q, p])
        for o in range(fs.d_out):
            free.bank.add_constant(h, o, 0, float(C[q, p, o]))
    return free, alpha


def pair_layer(n, funcs, config):
    """Trivial-group layer on ``n`` positions with scalar pair functions ``funcs[q][p]``."""
    table_layer = FSKALayer(Trivial(n), 1, 1, spline=config)
    H = table_layer.table.num_orbits
    per_orbit = [None] * H
    for q in range(n):
        for p in range(n):
            per_orbit[int(table_layer.table.ids[q, p])] = [[funcs[q][p]]]
    bank = KABank.from_functions(per_orbit, config)
    return FSKALayer(Trivial(n), 1, 1, bank=bank)
