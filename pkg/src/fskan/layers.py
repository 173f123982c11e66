"""Function-sharing KA layers.

Data layout everywhere is ``(batch, positions, channels)`` where positions are
the flattened index tuples ``[N]^k`` in row-major order.  A layer owns a
:class:`KABank` of KA sub-layers and an orbit table; the sub-layer used for the
position pair ``(q, p)`` is ``bank[orbit_to_bank[ids[q, p]]]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .permgroup import (
    DirectProduct,
    GroupError,
    GroupSpec,
    OrbitTable,
    Trivial,
    all_tuples,
    enumerate_orbits,
    find_element,
    parse_group,
)
from .spline import SplineConfig, UnivariateFunction, base_activation, basis_with_derivative

AGGREGATIONS = ("sum", "mean")


class LayerError(ValueError):
    pass


class NotEquivariantError(LayerError):
    """Raised when a layer claimed to be equivariant is not."""

    def __init__(self, message, sigma=None, q=None, p=None, deviation=None):
        super().__init__(message)
        self.sigma, self.q, self.p, self.deviation = sigma, q, p, deviation


# ---------------------------------------------------------------------------
# bank of KA sub-layers
# ---------------------------------------------------------------------------


class KABank:
    """``H`` KA sub-layers, each a ``d_out x d_in`` grid of spline functions.

    All functions of a bank share one knot vector, degree and base kind.
    """

    def __init__(self, H: int, d_in: int, d_out: int, config: SplineConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config or SplineConfig()
        self.H, self.d_in, self.d_out = H, d_in, d_out
        self.knots = self.config.knots()
        K = self.config.num_basis
        rng = rng if rng is not None else np.random.default_rng(0)
        self.coeffs = rng.normal(0.0, self.config.coeff_std, (H, d_out, d_in, K))
        shape = (H, d_out, d_in)
        if self.config.weight_init == "uniform":
            a = 1.0 / np.sqrt(d_in)
            self.w_base = rng.uniform(-a, a, shape) * self.config.w_base_init
            self.w_spline = rng.uniform(-a, a, shape) * self.config.w_spline_init
        else:
            self.w_base = np.full(shape, float(self.config.w_base_init))
            self.w_spline = np.full(shape, float(self.config.w_spline_init))

    @property
    def degree(self) -> int:
        return self.config.degree

    @property
    def base_kind(self) -> str:
        return self.config.base_kind

    def params(self) -> dict[str, np.ndarray]:
        return {"coeffs": self.coeffs, "w_base": self.w_base, "w_spline": self.w_spline}

    def num_params(self) -> int:
        return sum(v.size for v in self.params().values())

    def _features(self, x2):
        B, dB = basis_with_derivative(x2, self.knots, self.degree)
        base, dbase = base_activation(self.base_kind, x2)
        return B, dB, base, dbase

    def forward(self, x2: np.ndarray, hs=None):
        """Apply sub-layers ``hs`` (all by default) to rows ``x2`` of shape ``(R, d_in)``.

        Returns ``Y`` of shape ``(R, len(hs), d_out)`` and a cache for :meth:`backward`.
        """
        hs = np.arange(self.H) if hs is None else np.atleast_1d(np.asarray(hs))
        R = x2.shape[0]
        B, dB, base, dbase = self._features(x2)
        K = B.shape[-1]
        Wc = (self.w_spline[hs][..., None] * self.coeffs[hs]).reshape(-1, self.d_in * K)
        Wb = self.w_base[hs].reshape(-1, self.d_in)
        Y = B.reshape(R, -1) @ Wc.T
        if self.base_kind != "none":
            Y += base @ Wb.T
        cache = (hs, B, dB, base, dbase, Wc, Wb)
        return Y.reshape(R, len(hs), self.d_out), cache

    def backward(self, cache, gY: np.ndarray, grads: dict[str, np.ndarray] | None = None):
        """Input gradient ``(R, d_in)``; parameter gradients are accumulated into ``grads``."""
        hs, B, dB, base, dbase, Wc, Wb = cache
        R, K = B.shape[0], B.shape[-1]
        if grads is None:
            grads = self.zero_grads()
        gYf = gY.reshape(R, -1)
        nh = len(hs)
        GB = (gYf.T @ B.reshape(R, -1)).reshape(nh, self.d_out, self.d_in, K)
        np.add.at(grads["coeffs"], hs, self.w_spline[hs][..., None] * GB)
        np.add.at(grads["w_spline"], hs, np.einsum("hoik,hoik->hoi", self.coeffs[hs], GB))
        gx = np.einsum("rik,rik->ri", (gYf @ Wc).reshape(R, self.d_in, K), dB)
        if self.base_kind != "none":
            np.add.at(grads["w_base"], hs, (gYf.T @ base).reshape(nh, self.d_out, self.d_in))
            gx += (gYf @ Wb) * dbase
        return gx

    def forward_segments(self, x2: np.ndarray, segments):
        """Rows ``start:stop`` of ``x2`` go through sub-layer ``h`` for each ``(start, stop, h)``.

        Features are computed once for all rows.  Returns ``Y`` of shape ``(R, d_out)``.
        """
        R = x2.shape[0]
        B, dB, base, dbase = self._features(x2)
        Bf = B.reshape(R, -1)
        Y = np.empty((R, self.d_out))
        for s, e, h in segments:
            Wc = (self.w_spline[h][..., None] * self.coeffs[h]).reshape(self.d_out, -1)
            Y[s:e] = Bf[s:e] @ Wc.T
            if self.base_kind != "none":
                Y[s:e] += base[s:e] @ self.w_base[h].T
        return Y, (segments, Bf, dB, base, dbase)

    def backward_segments(self, cache, gY: np.ndarray, grads: dict[str, np.ndarray]):
        segments, Bf, dB, base, dbase = cache
        R, K = Bf.shape[0], dB.shape[-1]
        gx = np.empty((R, self.d_in))
        for s, e, h in segments:
            g = gY[s:e]
            GB = (g.T @ Bf[s:e]).reshape(self.d_out, self.d_in, K)
            grads["coeffs"][h] += self.w_spline[h][..., None] * GB
            grads["w_spline"][h] += np.einsum("oik,oik->oi", self.coeffs[h], GB)
            Wc = (self.w_spline[h][..., None] * self.coeffs[h]).reshape(self.d_out, -1)
            gx[s:e] = np.einsum("rik,rik->ri", (g @ Wc).reshape(-1, self.d_in, K), dB[s:e])
            if self.base_kind != "none":
                grads["w_base"][h] += g.T @ base[s:e]
                gx[s:e] += (g @ self.w_base[h]) * dbase[s:e]
        return gx

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params().items()}

    def range_bounds(self, lo, hi):
        """Guaranteed bounds ``(low, high)``, each ``(H, d_out, d_in)``, of every
        function over input channel intervals ``[lo[i], hi[i]]``."""
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (self.d_in,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (self.d_in,))
        Ba = basis_with_derivative(lo, self.knots, self.degree)[0]
        Bb = basis_with_derivative(hi, self.knots, self.degree)[0]
        sa = np.einsum("hoik,ik->hoi", self.coeffs, Ba)
        sb = np.einsum("hoik,ik->hoi", self.coeffs, Bb)
        # the spline is a convex combination of its coefficients on the grid
        # and linear beyond it
        s_lo = np.minimum(np.minimum(sa, sb), self.coeffs.min(axis=-1))
        s_hi = np.maximum(np.maximum(sa, sb), self.coeffs.max(axis=-1))
        ws = self.w_spline
        low = np.where(ws >= 0, ws * s_lo, ws * s_hi)
        high = np.where(ws >= 0, ws * s_hi, ws * s_lo)
        b_lo, b_hi = _base_range(self.base_kind, lo, hi)
        wb = self.w_base
        low = low + np.where(wb >= 0, wb * b_lo, wb * b_hi)
        high = high + np.where(wb >= 0, wb * b_hi, wb * b_lo)
        return low, high

    def function(self, h: int, o: int, i: int) -> UnivariateFunction:
        return UnivariateFunction(self.knots.copy(), self.coeffs[h, o, i].copy(), self.degree,
                                  self.base_kind, float(self.w_base[h, o, i]),
                                  float(self.w_spline[h, o, i]))

    def add_constant(self, h: int, o: int, i: int, c: float) -> None:
        """Shift one function by a constant (exact by partition of unity)."""
        ws = self.w_spline[h, o, i]
        if ws == 0.0:
            self.coeffs[h, o, i] = c
            self.w_spline[h, o, i] = 1.0
        else:
            self.coeffs[h, o, i] += c / ws

    def set_function(self, h: int, o: int, i: int, f: UnivariateFunction) -> None:
        if f.degree != self.degree or not np.array_equal(f.knots, self.knots):
            raise LayerError("function grid does not match the bank grid")
        if f.base_kind != self.base_kind and f.w_base != 0.0:
            raise LayerError("function base kind does not match the bank")
        self.coeffs[h, o, i] = f.coeffs
        self.w_base[h, o, i] = f.w_base
        self.w_spline[h, o, i] = f.w_spline

    def copy(self) -> KABank:
        new = KABank.__new__(KABank)
        new.config, new.H, new.d_in, new.d_out = self.config, self.H, self.d_in, self.d_out
        new.knots = self.knots.copy()
        new.coeffs, new.w_base, new.w_spline = (self.coeffs.copy(), self.w_base.copy(),
                                                self.w_spline.copy())
        return new

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "H": self.H, "d_in": self.d_in, "d_out": self.d_out,
            "coeffs": self.coeffs.ravel().tolist(),
            "w_base": self.w_base.ravel().tolist(),
            "w_spline": self.w_spline.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> KABank:
        bank = cls(int(d["H"]), int(d["d_in"]), int(d["d_out"]), SplineConfig.from_dict(d["config"]))
        bank.coeffs = np.array(d["coeffs"], dtype=float).reshape(bank.coeffs.shape)
        bank.w_base = np.array(d["w_base"], dtype=float).reshape(bank.w_base.shape)
        bank.w_spline = np.array(d["w_spline"], dtype=float).reshape(bank.w_spline.shape)
        return bank

    @classmethod
    def from_functions(cls, funcs, config: SplineConfig) -> KABank:
        """Bank from a nested list ``funcs[h][o][i]`` of functions on the config grid."""
        H, d_out, d_in = len(funcs), len(funcs[0]), len(funcs[0][0])
        bank = cls(H, d_in, d_out, config)
        for h in range(H):
            for o in range(d_out):
                for i in range(d_in):
                    bank.set_function(h, o, i, funcs[h][o][i])
        return bank


SILU_ARGMIN = -1.2784645427610738


def _base_range(kind, lo, hi):
    """Exact range of the base activation over ``[lo, hi]`` (elementwise)."""
    va, _ = base_activation(kind, lo)
    vb, _ = base_activation(kind, hi)
    low, high = np.minimum(va, vb), np.maximum(va, vb)
    if kind == "silu":
        vmin, _ = base_activation(kind, SILU_ARGMIN)
        inside = (lo <= SILU_ARGMIN) & (hi >= SILU_ARGMIN)
        low = np.where(inside, vmin, low)
    return low, high


# ---------------------------------------------------------------------------
# helpers shared by the layer kinds
# ---------------------------------------------------------------------------


def _as_batch(x: np.ndarray):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise LayerError(f"expected (batch, positions, channels) input, got shape {x.shape}")
    return x, False


def _infer_size(group: GroupSpec, k: int, positions: int):
    if k == 0:
        raise LayerError("order-0 input has exactly one position")
    if isinstance(group, DirectProduct) or not group.is_family:
        raise LayerError(
            f"input has {positions} positions but {group} expects {group.degree**k}; "
            "re-instantiate the layer explicitly"
        )
    n = int(round(positions ** (1.0 / k)))
    if n**k != positions:
        raise LayerError(f"{positions} positions is not an order-{k} tensor")
    return n


def _bank_index(old: OrbitTable, old_map: np.ndarray, new: OrbitTable) -> np.ndarray:
    lookup = {t: int(old_map[h]) for h, t in enumerate(old.types)}
    out = np.empty(new.num_orbits, dtype=np.int64)
    for h, t in enumerate(new.types):
        if t not in lookup:
            raise LayerError(
                f"orbit type {t} does not occur at the original size; no shared function exists"
            )
        out[h] = lookup[t]
    return out


# ---------------------------------------------------------------------------
# FS-KA layers
# ---------------------------------------------------------------------------


class FSKALayer:
    """Equivariant (or, with ``k_out=0``, invariant) function-sharing KA layer.

    ``out[q] = sum_p Phi^{h(q,p)}(x[p])`` where ``h(q, p)`` is the orbit of the
    pair; with ``aggregation="mean"`` each orbit's sum is divided by the number
    of its members in row ``q``.
    """

    kind = "fs"
    bank_class = KABank

    def __init__(self, group: GroupSpec | str, d_in: int, d_out: int, k_in: int = 1,
                 k_out: int = 1, aggregation: str = "sum", spline: SplineConfig | None = None,
                 rng: np.random.Generator | None = None, *, bank: KABank | None = None,
                 table: OrbitTable | None = None, orbit_to_bank: np.ndarray | None = None):
        if isinstance(group, str):
            group = parse_group(group)
        if aggregation not in AGGREGATIONS:
            raise LayerError(f"unknown aggregation {aggregation!r}")
        self.group, self.d_in, self.d_out = group, int(d_in), int(d_out)
        self.k_in, self.k_out, self.aggregation = int(k_in), int(k_out), aggregation
        self.table = table if table is not None else enumerate_orbits(group, k_out, k_in)
        H = self.table.num_orbits
        self.bank = bank if bank is not None else KABank(H, d_in, d_out, spline, rng)
        self.orbit_to_bank = (np.arange(H) if orbit_to_bank is None
                              else np.asarray(orbit_to_bank, dtype=np.int64))
        self._sizes: dict = {}
        self._build()

    # structure -------------------------------------------------------------

    def _build(self):
        t = self.table
        Hb = self.bank.H
        P_out, P_in = t.n_out, t.n_in
        cols = (np.arange(P_in)[None, :] * Hb + self.orbit_to_bank[t.ids]).ravel()
        rows = np.repeat(np.arange(P_out), P_in)
        if self.aggregation == "mean":
            counts = t.counts()
            w = 1.0 / counts[rows, t.ids.ravel()]
        else:
            w = np.ones(len(rows))
        self.S = sp.csr_matrix((w, (rows, cols)), shape=(P_out, P_in * Hb))
        self.S.sort_indices()
        self.ST = self.S.T.tocsr()

    @property
    def n(self) -> int:
        return self.group.degree

    @property
    def n_in(self) -> int:
        return self.table.n_in

    @property
    def n_out(self) -> int:
        return self.table.n_out

    @property
    def num_orbits(self) -> int:
        return self.table.num_orbits

    def params(self) -> dict[str, np.ndarray]:
        return self.bank.params()

    def num_params(self) -> int:
        return self.bank.num_params()

    def function(self, h: int, o: int, i: int) -> UnivariateFunction:
        """The shared function of orbit ``h`` from input channel ``i`` to output ``o``."""
        return self.bank.function(int(self.orbit_to_bank[h]), o, i)

    def pair_function(self, q: int, p: int, o: int, i: int) -> UnivariateFunction:
        return self.function(int(self.table.ids[q, p]), o, i)

    def at_size(self, size) -> FSKALayer:
        """Layer for a different domain size sharing this layer's parameters."""
        key = size if np.ndim(size) == 0 else tuple(size)
        if key not in self._sizes:
            self._sizes[key] = instantiate_at_size(self, size)
        return self._sizes[key]

    def _resolve(self, positions: int):
        if positions == self.n_in:
            return self
        return self.at_size(_infer_size(self.group, self.k_in, positions))

    # computation ----------------------------------------------------------

    def forward_cache(self, x: np.ndarray):
        x, single = _as_batch(x)
        layer = self._resolve(x.shape[1])
        if x.shape[2] != self.d_in:
            raise LayerError(f"expected {self.d_in} input channels, got {x.shape[2]}")
        b, P_in, _ = x.shape
        Y, bcache = layer.bank.forward(x.reshape(-1, self.d_in))
        Hb = layer.bank.H
        Yt = Y.reshape(b, P_in * Hb, self.d_out).transpose(1, 0, 2).reshape(P_in * Hb, -1)
        out = (layer.S @ Yt).reshape(layer.n_out, b, self.d_out).transpose(1, 0, 2)
        out = np.ascontiguousarray(out)
        cache = (layer, bcache, b, P_in, single)
        return (out[0] if single else out), cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cache(x)[0]

    __call__ = forward

    def backward(self, cache, gout: np.ndarray):
        """Returns ``(grad_x, grads)``; shared parameters accumulate over their orbit."""
        layer, bcache, b, P_in, single = cache
        gout = np.asarray(gout, dtype=float)
        if single:
            gout = gout[None]
        if gout.shape != (b, layer.n_out, self.d_out):
            raise LayerError(f"upstream gradient has shape {gout.shape}")
        gt = gout.transpose(1, 0, 2).reshape(layer.n_out, -1)
        gY = (layer.ST @ gt).reshape(P_in, layer.bank.H, b, self.d_out).transpose(2, 0, 1, 3)
        grads = self.bank.zero_grads()
        gx = layer.bank.backward(bcache, gY.reshape(b * P_in, layer.bank.H, self.d_out), grads)
        gx = gx.reshape(b, P_in, self.d_in)
        return (gx[0] if single else gx), grads

    # dense reference -----------------------------------------------------

    def materialize(self) -> list:
        """Full ``P_out x P_in`` matrix of sub-layer indices (bank rows)."""
        return self.orbit_to_bank[self.table.ids]

    # serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "group": str(self.group),
            "d_in": self.d_in, "d_out": self.d_out,
            "k_in": self.k_in, "k_out": self.k_out,
            "aggregation": self.aggregation,
            "orbit_types": [list(t) for t in self.table.types],
            "orbit_to_bank": self.orbit_to_bank.tolist(),
            "bank": self.bank.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FSKALayer:
        if d.get("kind", "fs") != cls.kind:
            raise LayerError(f"cannot load a {d.get('kind')!r} layer as {cls.kind!r}")
        group = parse_group(d["group"])
        bank = cls.bank_class.from_dict(d["bank"])
        layer = cls(group, d["d_in"], d["d_out"], d["k_in"], d["k_out"], d["aggregation"],
                    bank=bank, orbit_to_bank=np.array(d["orbit_to_bank"]))
        types = [tuple(t) for t in d["orbit_types"]]
        if types != list(layer.table.types):
            raise LayerError("stored orbit typing does not match the rebuilt table")
        return layer

    def __repr__(self):
        return (f"{type(self).__name__}({self.group}, d_in={self.d_in}, d_out={self.d_out}, "
                f"k=({self.k_out},{self.k_in}), orbits={self.num_orbits})")


class FSInvariantLayer(FSKALayer):
    """Invariant FS-KA layer: ``out = sum_p Phi^{h(p)}(x[p])``, output shape ``(batch, 1, d_out)``."""

    kind = "invariant"

    def __init__(self, group, d_in, d_out, k_in: int = 1, k_out: int = 0, aggregation="sum",
                 spline=None, rng=None, **kw):
        if k_out != 0:
            raise LayerError("invariant layers have output order 0")
        super().__init__(group, d_in, d_out, k_in, 0, aggregation, spline, rng, **kw)


def ka_layer(d_in: int, d_out: int, spline: SplineConfig | None = None,
             rng: np.random.Generator | None = None) -> FSKALayer:
    """Plain KA layer on a single position (a readout head)."""
    return FSKALayer(Trivial(1), d_in, d_out, k_in=0, k_out=0, spline=spline, rng=rng)


# ---------------------------------------------------------------------------
# efficient layer
# ---------------------------------------------------------------------------


class EfficientFSKALayer:
    """Aggregate-then-transform layer: ``out[q] = sum_h Phi^h(A_h(x)[q])``.

    With explicit ``alphas`` the aggregate is ``alpha_h x[q] + sum_{(q,p) in O_h} x[p]``.
    By default (``alphas=None``) orbits of family groups aggregate over the
    orbit with the "distinct index" constraints of symmetric factors dropped, so
    ``S_n`` gets ``x[q]`` and the global sum, ``S_n x S_m`` gets the entry, its
    row sum, its column sum and the total, and cyclic factors keep their shift.
    Orbits that do not meet row ``q`` contribute nothing to ``out[q]``.
    """

    kind = "efficient"

    def __init__(self, group: GroupSpec | str, d_in: int, d_out: int, k_in: int = 1,
                 k_out: int = 1, aggregation: str = "sum", spline: SplineConfig | None = None,
                 rng: np.random.Generator | None = None, alphas=None, *,
                 bank: KABank | None = None, table: OrbitTable | None = None,
                 orbit_to_bank: np.ndarray | None = None):
        if isinstance(group, str):
            group = parse_group(group)
        if aggregation not in AGGREGATIONS:
            raise LayerError(f"unknown aggregation {aggregation!r}")
        self.group, self.d_in, self.d_out = group, int(d_in), int(d_out)
        self.k_in, self.k_out, self.aggregation = int(k_in), int(k_out), aggregation
        self.table = table if table is not None else enumerate_orbits(group, k_out, k_in)
        H = self.table.num_orbits
        if alphas is not None:
            alphas = [int(a) for a in alphas]
            if len(alphas) != H or any(a not in (0, 1) for a in alphas):
                raise LayerError(f"alphas must be {H} values in {{0, 1}}")
            if any(alphas) and k_in != k_out:
                raise LayerError("alpha terms need matching input and output orders")
        self.alphas = alphas
        self.bank = bank if bank is not None else KABank(H, d_in, d_out, spline, rng)
        self.orbit_to_bank = (np.arange(H) if orbit_to_bank is None
                              else np.asarray(orbit_to_bank, dtype=np.int64))
        self._sizes: dict = {}
        self._build()

    def _membership(self, h: int) -> np.ndarray:
        t = self.table
        if self.alphas is not None:
            M = (t.ids == h).astype(float)
            if self.alphas[h]:
                M[np.diag_indices(min(M.shape))] += 1.0
            return M
        if not self.group.is_family:
            return (t.ids == h).astype(float)
        n = self.group.degree
        tuples = np.concatenate(
            [np.repeat(all_tuples(n, self.k_out), t.n_in, axis=0),
             np.tile(all_tuples(n, self.k_in), (t.n_out, 1))], axis=1)
        key = np.asarray(t.types[h])
        mask = self.group.relaxed_mask(tuples, key).reshape(t.n_out, t.n_in)
        # rows the orbit does not meet stay empty
        meets = np.any(t.ids == h, axis=1)
        return (mask & meets[:, None]).astype(float)

    def _build(self):
        self.agg = []
        self._scatter = []
        for h in range(self.table.num_orbits):
            M = self._membership(h)
            rows = np.flatnonzero(M.sum(axis=1) > 0)
            if self.aggregation == "mean" and len(rows):
                M[rows] /= M[rows].sum(axis=1, keepdims=True)
            uniq, inv = np.unique(M[rows], axis=0, return_inverse=True)
            inv = inv.ravel()
            self.agg.append((rows, uniq, inv))
            scatter = np.zeros((len(uniq), len(rows)))
            scatter[inv, np.arange(len(rows))] = 1.0
            self._scatter.append(scatter)

    @property
    def n(self) -> int:
        return self.group.degree

    @property
    def n_in(self) -> int:
        return self.table.n_in

    @property
    def n_out(self) -> int:
        return self.table.n_out

    @property
    def num_orbits(self) -> int:
        return self.table.num_orbits

    def params(self):
        return self.bank.params()

    def num_params(self):
        return self.bank.num_params()

    def function(self, h, o, i):
        return self.bank.function(int(self.orbit_to_bank[h]), o, i)

    def at_size(self, size):
        key = size if np.ndim(size) == 0 else tuple(size)
        if key not in self._sizes:
            self._sizes[key] = instantiate_at_size(self, size)
        return self._sizes[key]

    def _resolve(self, positions):
        if positions == self.n_in:
            return self
        return self.at_size(_infer_size(self.group, self.k_in, positions))

    def forward_cache(self, x):
        x, single = _as_batch(x)
        layer = self._resolve(x.shape[1])
        if x.shape[2] != self.d_in:
            raise LayerError(f"expected {self.d_in} input channels, got {x.shape[2]}")
        b = x.shape[0]
        out = np.zeros((b, layer.n_out, self.d_out))
        # aggregate every orbit first, then run all sub-layers on one feature pass
        blocks, segments, start = [], [], 0
        for h, (rows, uniq, inv) in enumerate(layer.agg):
            if len(rows) == 0:
                continue
            A = (uniq @ x).reshape(-1, self.d_in)
            blocks.append(A)
            segments.append((start, start + len(A), int(layer.orbit_to_bank[h])))
            start += len(A)
        if blocks:
            Y, bc = layer.bank.forward_segments(np.concatenate(blocks), segments)
            k = 0
            for rows, uniq, inv in layer.agg:
                if len(rows) == 0:
                    continue
                s, e, _ = segments[k]
                out[:, rows] += Y[s:e].reshape(b, len(uniq), self.d_out)[:, inv]
                k += 1
        else:
            bc = None
        cache = (layer, bc, x.shape, single)
        return (out[0] if single else out), cache

    def forward(self, x):
        return self.forward_cache(x)[0]

    __call__ = forward

    def backward(self, cache, gout):
        layer, bc, shape, single = cache
        gout = np.asarray(gout, dtype=float)
        if single:
            gout = gout[None]
        b = shape[0]
        if gout.shape != (b, layer.n_out, self.d_out):
            raise LayerError(f"upstream gradient has shape {gout.shape}")
        grads = self.bank.zero_grads()
        gx = np.zeros(shape)
        if bc is None:
            return (gx[0] if single else gx), grads
        live = [a for a in layer.agg if len(a[0])]
        gYs = [(sc @ gout[:, rows]).reshape(-1, self.d_out)
               for (rows, _, _), sc in zip(layer.agg, layer._scatter) if len(rows)]
        gA = layer.bank.backward_segments(bc, np.concatenate(gYs), grads)
        for (rows, uniq, inv), (s, e, _) in zip(live, bc[0]):
            gx += uniq.T @ gA[s:e].reshape(b, len(uniq), self.d_in)
        return (gx[0] if single else gx), grads

    # operation counts -------------------------------------------------

    def applications_per_slot(self) -> np.ndarray:
        """Number of sub-layer applications contributing to each output slot."""
        counts = np.zeros(self.n_out, dtype=np.int64)
        for rows, _, _ in self.agg:
            counts[rows] += 1
        return counts

    def distinct_inputs(self) -> list[int]:
        """Distinct aggregated input vectors per orbit (one sub-layer evaluation each)."""
        return [len(uniq) for _, uniq, _ in self.agg]

    def broadcast_units(self) -> int:
        """Sub-layer computations counted with broadcasting along matrix axes.

        On a ``(n, m)`` matrix domain a term that depends on only one index (or
        none) is a single vectorised computation broadcast along the other axis;
        a term that varies along both axes costs one computation per row.
        """
        if not (isinstance(self.group, DirectProduct) and self.k_in == self.k_out == 1):
            return int(sum(self.distinct_inputs()))
        n, m = self.group.left.degree, self.group.right.degree
        total = 0
        for rows, uniq, inv in self.agg:
            if len(rows) == 0:
                continue
            grid = np.full(n * m, -1)
            grid[rows] = inv
            grid = grid.reshape(n, m)
            varies_rows = np.any(grid != grid[:1, :])
            varies_cols = np.any(grid != grid[:, :1])
            total += n if (varies_rows and varies_cols) else 1
        return total

    def to_dict(self):
        return {
            "kind": self.kind,
            "group": str(self.group),
            "d_in": self.d_in, "d_out": self.d_out,
            "k_in": self.k_in, "k_out": self.k_out,
            "aggregation": self.aggregation,
            "alphas": self.alphas,
            "orbit_types": [list(t) for t in self.table.types],
            "orbit_to_bank": self.orbit_to_bank.tolist(),
            "bank": self.bank.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") != cls.kind:
            raise LayerError(f"cannot load a {d.get('kind')!r} layer as {cls.kind!r}")
        layer = cls(parse_group(d["group"]), d["d_in"], d["d_out"], d["k_in"], d["k_out"],
                    d["aggregation"], alphas=d.get("alphas"), bank=KABank.from_dict(d["bank"]),
                    orbit_to_bank=np.array(d["orbit_to_bank"]))
        if [tuple(t) for t in d["orbit_types"]] != list(layer.table.types):
            raise LayerError("stored orbit typing does not match the rebuilt table")
        return layer

    def __repr__(self):
        return (f"EfficientFSKALayer({self.group}, d_in={self.d_in}, d_out={self.d_out}, "
                f"orbits={self.num_orbits})")


LAYER_KINDS = {"fs": FSKALayer, "invariant": FSInvariantLayer, "efficient": EfficientFSKALayer}


def layer_from_dict(d: dict):
    kind = d.get("kind")
    if kind not in LAYER_KINDS:
        raise LayerError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind].from_dict(d)


def instantiate_at_size(layer, size):
    """Same-kind layer on a resized domain that shares ``layer``'s parameters.

    Orbits are matched across sizes by their size-independent type; the new
    layer's bank *is* the old bank, so training either updates both.
    """
    group = layer.group
    if not group.is_family:
        raise LayerError(f"{group} is a generated group; re-instantiation is unsupported")
    try:
        new_group = group.resized(size)
    except GroupError as err:
        raise LayerError(str(err)) from err
    if str(new_group) == str(group):
        return layer
    table = enumerate_orbits(new_group, layer.k_out, layer.k_in)
    mapping = _bank_index(layer.table, layer.orbit_to_bank, table)
    kw = dict(bank=layer.bank, table=table, orbit_to_bank=mapping)
    if isinstance(layer, EfficientFSKALayer):
        if layer.alphas is not None:
            old = {t: a for t, a in zip(layer.table.types, layer.alphas)}
            kw["alphas"] = [old[t] for t in table.types]
        return EfficientFSKALayer(new_group, layer.d_in, layer.d_out, layer.k_in, layer.k_out,
                                  layer.aggregation, **kw)
    cls = type(layer)
    return cls(new_group, layer.d_in, layer.d_out, layer.k_in, layer.k_out,
               layer.aggregation, **kw)


# ---------------------------------------------------------------------------
# mixed orders
# ---------------------------------------------------------------------------


class MixedOrderLayer:
    """Superposition of FS layers between tensor orders.

    ``parts[(k_out, k_in)]`` maps order-``k_in`` inputs to order-``k_out``
    outputs; each output order is the sum of the parts that produce it.
    """

    def __init__(self, parts: dict):
        self.parts = dict(parts)

    def forward_cache(self, xs: dict):
        outs, caches = {}, {}
        for key in sorted(self.parts):
            k_out, k_in = key
            y, c = self.parts[key].forward_cache(xs[k_in])
            outs[k_out] = outs.get(k_out, 0) + y
            caches[key] = c
        return outs, caches

    def forward(self, xs: dict) -> dict:
        return self.forward_cache(xs)[0]

    __call__ = forward

    def backward(self, caches, gouts: dict):
        gxs, grads = {}, {}
        for key in sorted(self.parts):
            k_out, k_in = key
            gx, g = self.parts[key].backward(caches[key], gouts[k_out])
            gxs[k_in] = gxs.get(k_in, 0) + gx
            grads[key] = g
        return gxs, grads


# ---------------------------------------------------------------------------
# canonicalization
# ---------------------------------------------------------------------------


@dataclass
class CanonicalizationResult:
    fs_layer: FSKALayer
    constants: np.ndarray
    alphas: np.ndarray
    max_deviation: float


def _pair_tuple(table: OrbitTable, q: int, p: int, n: int) -> tuple[int, ...]:
    qt = np.unravel_index(q, (n,) * table.k_out) if table.k_out else ()
    pt = np.unravel_index(p, (n,) * table.k_in) if table.k_in else ()
    return tuple(int(v) for v in qt) + tuple(int(v) for v in pt)


def canonicalize_to_fs(layer: FSKALayer, group: GroupSpec | str,
                       probe_domain: tuple[float, float] = (-1.0, 1.0), tol: float = 1e-8,
                       num_probes: int = 32, num_checks: int = 100,
                       rng: np.random.Generator | None = None) -> CanonicalizationResult:
    """Rewrite a ``group``-equivariant KA layer as an FS layer for ``group``.

    The input may be any :class:`FSKALayer`, in particular an unconstrained one
    built on the trivial group.  Each pair function is compared with the
    function of its orbit representative; the differences must be constants
    ``C[q,p]``.  Their row sums ``alpha[q]`` must be constant on output orbits,
    and are spread evenly over the ``P_in * d_in`` summands of the new layer.
    """
    if isinstance(group, str):
        group = parse_group(group)
    if group.degree != layer.group.degree:
        raise LayerError("the layer and the group act on different sizes")
    rng = rng if rng is not None else np.random.default_rng(0)
    lo, hi = probe_domain
    table = enumerate_orbits(group, layer.k_out, layer.k_in)
    P_out, P_in, d_out, d_in = table.n_out, table.n_in, layer.d_out, layer.d_in
    n = group.degree

    if layer.aggregation != "sum":
        raise LayerError("canonicalization expects a sum-aggregated layer")
    # per (h, o, i) function values at the probes: (h, o, i, t)
    bank = layer.bank
    probes = np.linspace(lo, hi, num_probes)
    Bv, _, base, _ = bank._features(probes)
    per = (np.einsum("hoik,tk->hoit", bank.w_spline[..., None] * bank.coeffs, Bv)
           + bank.w_base[..., None] * base[None, None, None, :])

    bank_of = layer.orbit_to_bank[layer.table.ids]  # (P_out, P_in)
    rep_q = np.array([_flat_index(table.representatives[h][: table.k_out], n)
                      for h in range(table.num_orbits)])
    rep_p = np.array([_flat_index(table.representatives[h][table.k_out:], n)
                      for h in range(table.num_orbits)])
    rep_bank = bank_of[rep_q[table.ids], rep_p[table.ids]]  # (P_out, P_in)
    diff = per[bank_of] - per[rep_bank]  # (P_out, P_in, o, i, t)
    C = diff.mean(axis=-1)
    dev = np.abs(diff - C[..., None]).max(axis=-1).max(axis=(-1, -2))
    scale = 1.0 + np.abs(per).max()
    worst = np.unravel_index(np.argmax(dev), dev.shape)
    if dev[worst] > tol * scale:
        q, p = int(worst[0]), int(worst[1])
        h = int(table.ids[q, p])
        src = _pair_tuple(table, int(rep_q[h]), int(rep_p[h]), n)
        sigma = find_element(group, src, _pair_tuple(table, q, p, n))
        raise NotEquivariantError(
            f"functions of pair (q={q}, p={p}) and its orbit representative differ by a "
            f"non-constant amount (deviation {dev[worst]:.3g}); sigma={sigma}",
            sigma, q, p, float(dev[worst]))

    alphas = C.sum(axis=(1, 3))  # (P_out, d_out)
    out_table = enumerate_orbits(group, layer.k_out, 0)
    out_ids = out_table.ids[:, 0]
    for g in range(out_table.num_orbits):
        members = np.flatnonzero(out_ids == g)
        spread = np.abs(alphas[members] - alphas[members[0]]).max()
        if spread > tol * scale:
            bad = int(members[np.argmax(np.abs(alphas[members] - alphas[members[0]]).max(axis=1))])
            sigma = find_element(group, _pair_tuple(out_table, int(members[0]), 0, n)[: layer.k_out],
                                 _pair_tuple(out_table, bad, 0, n)[: layer.k_out])
            raise NotEquivariantError(
                f"row constants differ across output orbit at q={bad} "
                f"(deviation {spread:.3g}); sigma={sigma}", sigma, bad, None, float(spread))

    new_bank = KABank(table.num_orbits, d_in, d_out, bank.config)
    new_bank.knots = bank.knots.copy()
    for h in range(table.num_orbits):
        src = int(bank_of[rep_q[h], rep_p[h]])
        new_bank.coeffs[h] = bank.coeffs[src]
        new_bank.w_base[h] = bank.w_base[src]
        new_bank.w_spline[h] = bank.w_spline[src]
        share = alphas[rep_q[h]] / (P_in * d_in)
        for o in range(d_out):
            for i in range(d_in):
                if share[o] != 0.0:
                    new_bank.add_constant(h, o, i, float(share[o]))
    fs = FSKALayer(group, d_in, d_out, layer.k_in, layer.k_out, "sum", bank=new_bank, table=table)

    xs = rng.uniform(lo, hi, (num_checks, P_in, d_in))
    mismatch = np.abs(fs.forward(xs) - layer.forward(xs)).max()
    if mismatch > tol * scale * max(1, P_in * d_in):
        raise NotEquivariantError(f"canonical layer output differs by {mismatch:.3g}",
                                  None, None, None, float(mismatch))
    return CanonicalizationResult(fs, C, alphas, float(mismatch))


def _flat_index(t, n: int) -> int:
    out = 0
    for v in t:
        out = out * n + int(v)
    return out


def unconstrained_layer(n: int, d_in: int, d_out: int, k_in: int = 1, k_out: int = 1,
                        spline: SplineConfig | None = None,
                        rng: np.random.Generator | None = None) -> FSKALayer:
    """KA layer with an independent sub-layer for every position pair."""
    return FSKALayer(Trivial(n), d_in, d_out, k_in, k_out, spline=spline, rng=rng)
