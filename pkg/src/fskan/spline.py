"""B-spline univariate functions with a base-activation term.

A learnable function is

    phi(x) = w_base * base(x) + w_spline * sum_i c_i B_{i,p}(x)

with ``B_{i,p}`` the B-spline basis on an extended knot vector.  Outside the
grid the basis is continued linearly from the boundary, so every function is
defined (and differentiable almost everywhere) on the whole real line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BASE_KINDS = ("silu", "identity", "none")


class SplineError(ValueError):
    pass


def uniform_knots(lo: float, hi: float, num_intervals: int, degree: int) -> np.ndarray:
    """Extended uniform knot vector of length ``G + 2p + 1`` covering ``[lo, hi]``."""
    if not hi > lo:
        raise SplineError(f"empty grid interval [{lo}, {hi}]")
    if num_intervals < 1 or degree < 0:
        raise SplineError("need at least one interval and a non-negative degree")
    h = (hi - lo) / num_intervals
    k = lo + h * np.arange(-degree, num_intervals + degree + 1, dtype=float)
    k[degree], k[degree + num_intervals] = lo, hi
    return k


def _nonzero_basis(span: np.ndarray, x: np.ndarray, knots: np.ndarray, p: int):
    """Non-vanishing basis values at ``x`` (triangular de Boor table).

    Returns the degree ``p`` values ``N`` with ``N[:, r] = B_{span-p+r, p}`` and
    the degree ``p-1`` values of the same span (``None`` when ``p == 0``).
    """
    m = len(x)
    N = np.ones((m, 1))
    prev = None
    for j in range(1, p + 1):
        prev = N
        left = np.stack([x - knots[span + 1 - r] for r in range(1, j + 1)], axis=1)
        right = np.stack([knots[span + r] - x for r in range(1, j + 1)], axis=1)
        new = np.zeros((m, j + 1))
        saved = np.zeros(m)
        for r in range(j):
            temp = prev[:, r] / (knots[span + r + 1] - knots[span + 1 + r - j])
            new[:, r] = saved + right[:, r] * temp
            saved = left[:, j - 1 - r] * temp
        new[:, j] = saved
        N = new
    return N, prev


def basis_with_derivative(x, knots: np.ndarray, degree: int):
    """Basis values and their derivatives for every entry of ``x``.

    Returns arrays of shape ``x.shape + (len(knots) - degree - 1,)``.  At an
    interior knot the derivative is the left derivative (so a degree-1 kink
    reports the slope of the interval to its left).
    """
    x = np.asarray(x, dtype=float)
    knots = np.asarray(knots, dtype=float)
    p = degree
    nb = len(knots) - p - 1
    G = nb - p
    lo, hi = knots[p], knots[p + G]
    flat = x.ravel()
    xc = np.clip(flat, lo, hi)
    span = np.searchsorted(knots, xc, side="left") - 1
    span = np.clip(span, p, p + G - 1)
    if p == 3 and _is_uniform(knots):
        N, dN = _uniform_cubic(span, xc, knots)
    else:
        N, dN = _span_basis(span, xc, knots, p)
    shift = (flat - xc)[:, None]
    N = N + dN * shift
    B = np.zeros((len(flat), nb))
    dB = np.zeros((len(flat), nb))
    cols = span[:, None] - p + np.arange(p + 1)[None, :]
    rows = np.arange(len(flat))[:, None]
    B[rows, cols] = N
    dB[rows, cols] = dN
    return B.reshape(x.shape + (nb,)), dB.reshape(x.shape + (nb,))


def _is_uniform(knots: np.ndarray) -> bool:
    d = np.diff(knots)
    return bool(np.all(np.abs(d - d[0]) <= 1e-12 * abs(d[0])))


def _uniform_cubic(span: np.ndarray, xc: np.ndarray, knots: np.ndarray):
    """Closed-form cubic basis on a uniform grid."""
    h = knots[1] - knots[0]
    u = np.clip((xc - knots[span]) / h, 0.0, 1.0)
    v = 1.0 - u
    u2, u3 = u * u, u * u * u
    N = np.stack([v * v * v, 3 * u3 - 6 * u2 + 4, -3 * u3 + 3 * u2 + 3 * u + 1, u3],
                 axis=1) / 6.0
    dN = np.stack([-v * v, 3 * u2 - 4 * u, -3 * u2 + 2 * u + 1, u2], axis=1) / (2.0 * h)
    return N, dN


def _span_basis(span, xc, knots, p):
    N, prev = _nonzero_basis(span, xc, knots, p)
    dN = np.zeros_like(N)
    if p > 0:
        for r in range(p + 1):
            i = span - p + r
            if r >= 1:
                dN[:, r] += p * prev[:, r - 1] / (knots[i + p] - knots[i])
            if r <= p - 1:
                dN[:, r] -= p * prev[:, r] / (knots[i + p + 1] - knots[i + 1])
    return N, dN


def basis(x, knots, degree):
    return basis_with_derivative(x, knots, degree)[0]


def base_activation(kind: str, x):
    """``(value, derivative)`` of the base term."""
    x = np.asarray(x, dtype=float)
    if kind == "silu":
        s = 0.5 * (1.0 + np.tanh(0.5 * x))
        return x * s, s * (1.0 + x * (1.0 - s))
    if kind == "identity":
        return x, np.ones_like(x)
    if kind == "none":
        return np.zeros_like(x), np.zeros_like(x)
    raise SplineError(f"unknown base kind {kind!r}")


@dataclass
class FunctionGrad:
    """Derivatives of one function value with respect to its parameters."""

    coeffs: np.ndarray
    w_base: float
    w_spline: float


@dataclass
class UnivariateFunction:
    knots: np.ndarray
    coeffs: np.ndarray
    degree: int = 3
    base_kind: str = "silu"
    w_base: float = 1.0
    w_spline: float = 1.0

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.base_kind not in BASE_KINDS:
            raise SplineError(f"unknown base kind {self.base_kind!r}")
        if len(self.coeffs) != len(self.knots) - self.degree - 1:
            raise SplineError(
                f"{len(self.coeffs)} coefficients for {len(self.knots)} knots of degree {self.degree}"
            )
        inner = self.knots[self.degree: len(self.knots) - self.degree]
        if np.any(np.diff(self.knots) <= 0) or len(inner) < 2:
            raise SplineError("knots must be strictly increasing")

    @property
    def grid_lo(self) -> float:
        return float(self.knots[self.degree])

    @property
    def grid_hi(self) -> float:
        return float(self.knots[-self.degree - 1])

    @property
    def num_intervals(self) -> int:
        return len(self.coeffs) - self.degree

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise SplineError("input must be finite")
        return x

    def eval(self, x):
        x = self._check(x)
        B = basis(x, self.knots, self.degree)
        base, _ = base_activation(self.base_kind, x)
        out = self.w_base * base + self.w_spline * (B @ self.coeffs)
        return float(out) if out.ndim == 0 else out

    __call__ = eval

    def eval_grad(self, x):
        """Value, input derivative and parameter gradient at a scalar ``x``."""
        x = self._check(x)
        B, dB = basis_with_derivative(x, self.knots, self.degree)
        base, dbase = base_activation(self.base_kind, x)
        spl = B @ self.coeffs
        v = self.w_base * base + self.w_spline * spl
        dv = self.w_base * dbase + self.w_spline * (dB @ self.coeffs)
        grad = FunctionGrad(coeffs=self.w_spline * B, w_base=base, w_spline=spl)
        if x.ndim == 0:
            return float(v), float(dv), FunctionGrad(grad.coeffs, float(base), float(spl))
        return v, dv, grad

    def plus_constant(self, c: float) -> UnivariateFunction:
        """Same function shifted by ``c`` (partition of unity makes this exact)."""
        coeffs, ws = self.coeffs.copy(), self.w_spline
        if ws == 0.0:
            coeffs, ws = np.full_like(coeffs, c), 1.0
        else:
            coeffs = coeffs + c / ws
        return UnivariateFunction(self.knots.copy(), coeffs, self.degree, self.base_kind,
                                  self.w_base, ws)

    def sample(self, lo: float, hi: float, num: int = 256):
        xs = np.linspace(lo, hi, num)
        return xs, self.eval(xs)

    def to_dict(self) -> dict:
        return {
            "knots": self.knots.tolist(),
            "coeffs": self.coeffs.tolist(),
            "degree": self.degree,
            "base_kind": self.base_kind,
            "w_base": self.w_base,
            "w_spline": self.w_spline,
        }

    @classmethod
    def from_dict(cls, d: dict) -> UnivariateFunction:
        return cls(np.array(d["knots"]), np.array(d["coeffs"]), int(d["degree"]),
                   d["base_kind"], float(d["w_base"]), float(d["w_spline"]))


def random_function(rng: np.random.Generator, lo: float = -1.0, hi: float = 1.0,
                    num_intervals: int = 5, degree: int = 3, base_kind: str = "silu",
                    coeff_std: float = 0.1) -> UnivariateFunction:
    knots = uniform_knots(lo, hi, num_intervals, degree)
    coeffs = rng.normal(0.0, coeff_std, num_intervals + degree)
    return UnivariateFunction(knots, coeffs, degree, base_kind, 1.0, 1.0)


def from_relu(domain: tuple[float, float] = (-10.0, 10.0)) -> UnivariateFunction:
    """``max(0, x)`` as a degree-1 spline with a knot at 0.

    The grid is ``[-R, R]`` with ``R`` a power of two covering the domain, which
    keeps the evaluation free of rounding; the linear continuation beyond the
    grid makes the function exact on all of the reals.
    """
    lo, hi = domain
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise SplineError(f"invalid domain {domain}")
    R = 2.0 ** np.ceil(np.log2(max(abs(lo), abs(hi), 1.0)))
    knots = np.array([-2 * R, -R, 0.0, R, 2 * R])
    return UnivariateFunction(knots, np.array([0.0, 0.0, R]), 1, "none", 0.0, 1.0)


def from_affine(a: float, b_share: float,
                domain: tuple[float, float] = (-1.0, 1.0)) -> UnivariateFunction:
    """``x -> a*x + b_share`` as a one-interval degree-1 spline."""
    lo, hi = float(domain[0]), float(domain[1])
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise SplineError(f"domain must be bounded, got {domain}")
    if hi <= lo:
        lo, hi = lo - 0.5, lo + 0.5
    h = hi - lo
    knots = np.array([lo - h, lo, hi, hi + h])
    return UnivariateFunction(knots, np.array([a * lo + b_share, a * hi + b_share]),
                              1, "none", 0.0, 1.0)


def from_piecewise_linear(xs, ys) -> UnivariateFunction:
    """Degree-1 spline through ``(xs, ys)``, extended linearly past the ends."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 1 or len(xs) < 2 or xs.shape != ys.shape:
        raise SplineError("need matching 1-d node arrays with at least two nodes")
    if np.any(np.diff(xs) <= 0):
        raise SplineError("nodes must be strictly increasing")
    knots = np.concatenate([[2 * xs[0] - xs[1]], xs, [2 * xs[-1] - xs[-2]]])
    return UnivariateFunction(knots, ys.copy(), 1, "none", 0.0, 1.0)


def fit_function(f, lo: float, hi: float, num_intervals: int = 16, degree: int = 3,
                 samples: int = 512) -> UnivariateFunction:
    """Least-squares spline fit of a callable on ``[lo, hi]`` (no base term)."""
    knots = uniform_knots(lo, hi, num_intervals, degree)
    xs = np.linspace(lo, hi, samples)
    B = basis(xs, knots, degree)
    coeffs, *_ = np.linalg.lstsq(B, f(xs), rcond=None)
    return UnivariateFunction(knots, coeffs, degree, "none", 0.0, 1.0)


@dataclass
class SplineConfig:
    """Grid and initialisation settings shared by the functions of a layer."""

    degree: int = 3
    num_intervals: int = 5
    grid_range: tuple[float, float] = (-1.0, 1.0)
    base_kind: str = "silu"
    coeff_std: float = 0.1
    w_base_init: float = 1.0
    w_spline_init: float = 1.0
    # "constant": w = w_*_init; "uniform": w ~ U(-w_*_init, w_*_init) / sqrt(d_in)
    weight_init: str = "constant"

    def __post_init__(self):
        if self.weight_init not in ("constant", "uniform"):
            raise SplineError(f"unknown weight_init {self.weight_init!r}")

    def knots(self) -> np.ndarray:
        return uniform_knots(self.grid_range[0], self.grid_range[1],
                             self.num_intervals, self.degree)

    @property
    def num_basis(self) -> int:
        return self.num_intervals + self.degree

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "num_intervals": self.num_intervals,
            "grid_range": list(self.grid_range),
            "base_kind": self.base_kind,
            "coeff_std": self.coeff_std,
            "w_base_init": self.w_base_init,
            "w_spline_init": self.w_spline_init,
            "weight_init": self.weight_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SplineConfig:
        d = dict(d)
        d["grid_range"] = tuple(d.get("grid_range", (-1.0, 1.0)))
        return cls(**d)
