"""Synthetic datasets: noisy signal copies, invariant formulas and 2-D point sets.

Every generator draws from ``numpy.random.Generator(numpy.random.Philox(seed))``,
a 64-bit counter-based stream, so a seed fixes the data bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SIGNAL_CLASSES = ("sine", "sawtooth", "square")
SHAPE_CLASSES = ("circle", "two_moons", "square")


class DataError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class Dataset:
    """Inputs ``x`` of shape ``(count, positions, channels)`` with targets ``y``."""

    x: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> Dataset:
        return Dataset(self.x[idx], self.y[idx], dict(self.meta))

    def split(self, sizes) -> list[Dataset]:
        """Consecutive splits of the given sizes (the data are already shuffled)."""
        if sum(sizes) > len(self):
            raise DataError(f"requested {sum(sizes)} samples from {len(self)}")
        out, start = [], 0
        for s in sizes:
            out.append(self.subset(slice(start, start + s)))
            start += s
        return out

    def to_jsonl(self, path, shape=None) -> None:
        """One record per sample: ``{"shape", "values", "label"}`` (row-major values).

        ``shape`` gives the natural per-sample shape, e.g. ``(n, T)`` for signals.
        """
        shape = list(shape or self.meta.get("sample_shape") or self.x.shape[1:])
        with open(path, "w") as fh:
            for xi, yi in zip(self.x, self.y):
                label = int(yi) if np.issubdtype(self.y.dtype, np.integer) else float(yi)
                fh.write(json.dumps({"shape": shape, "values": xi.ravel().tolist(),
                                     "label": label}) + "\n")

    @classmethod
    def from_jsonl(cls, path, layout=None) -> Dataset:
        xs, ys, shape = [], [], None
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                shape = tuple(rec["shape"])
                xs.append(np.asarray(rec["values"], dtype=float).reshape(shape))
                ys.append(rec["label"])
        if not xs:
            raise DataError(f"{path} holds no samples")
        x = np.stack(xs)
        y = np.asarray(ys)
        return cls(to_positions(x, layout), y, {"sample_shape": list(shape)})


def to_positions(x: np.ndarray, layout=None) -> np.ndarray:
    """Reshape raw samples to ``(count, positions, channels)``.

    Samples of shape ``(n, T)`` on a matrix domain become ``n*T`` positions of a
    single channel; ``(n, d)`` point sets keep ``d`` channels with ``layout="set"``.
    """
    if layout == "set":
        return x.reshape(len(x), x.shape[1], -1)
    if x.ndim == 2:
        return x[:, :, None]
    return x.reshape(len(x), -1, 1)


# ---------------------------------------------------------------------------
# signals
# ---------------------------------------------------------------------------


def _balanced_labels(count: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(count) % k)


def clean_signal(kind: str, t: np.ndarray, amplitude, frequency, phase, offset) -> np.ndarray:
    arg = frequency * t + phase / (2 * np.pi)
    if kind == "sine":
        base = np.sin(2 * np.pi * arg)
    elif kind == "sawtooth":
        base = 2.0 * (arg - np.floor(arg)) - 1.0
    elif kind == "square":
        base = np.where(np.sin(2 * np.pi * arg) >= 0, 1.0, -1.0)
    else:
        raise DataError(f"unknown signal class {kind!r}")
    return amplitude * base + offset


def gen_signals(n: int = 5, T: int = 20, count: int = 300, noise_sigma: float = 0.3,
                seed: int = 0) -> Dataset:
    """``count`` samples of ``n`` noisy copies of one random signal of ``T`` steps.

    Parameters per sample: amplitude ~ U[0.5, 2], frequency ~ U[1, 4] cycles over
    ``[0, 1)``, phase ~ U[0, 2 pi], offset ~ U[-0.5, 0.5].  Labels are balanced
    (counts differ by at most one) and shuffled.  Returns ``x`` shaped
    ``(count, n*T, 1)`` in row-major ``(n, T)`` order.
    """
    if n < 1 or T < 1 or count < 0:
        raise DataError("n and T must be positive")
    rng = make_rng(seed)
    labels = _balanced_labels(count, 3, rng)
    t = np.arange(T) / T
    amp = rng.uniform(0.5, 2.0, count)
    freq = rng.uniform(1.0, 4.0, count)
    phase = rng.uniform(0.0, 2 * np.pi, count)
    offset = rng.uniform(-0.5, 0.5, count)
    clean = np.stack([clean_signal(SIGNAL_CLASSES[c], t, a, f, p, o)
                      for c, a, f, p, o in zip(labels, amp, freq, phase, offset)]) \
        if count else np.zeros((0, T))
    noise = rng.normal(0.0, 1.0, (count, n, T)) * noise_sigma
    x = clean[:, None, :] + noise
    meta = {"task": "signals", "n": n, "T": T, "noise_sigma": noise_sigma, "seed": seed,
            "sample_shape": [n, T], "group": f"prod(S({n}),C({T}))",
            "params": {"amplitude": amp.tolist(), "frequency": freq.tolist(),
                       "phase": phase.tolist(), "offset": offset.tolist()}}
    return Dataset(x.reshape(count, n * T, 1), labels.astype(np.int64), meta)


# ---------------------------------------------------------------------------
# invariant formulas
# ---------------------------------------------------------------------------


def _gauss_sum_sq(x):
    return np.exp(-np.sum(x**2, axis=1))


def _tanh_quartic(x):
    return np.tanh(5.0 * np.sum(x**4, axis=1) - 1.0)


def _exp_mixture(x):
    s = np.sin(np.pi * x)
    inner = 10.0 * x**2 + (s.sum(axis=1, keepdims=True) - s)
    return np.exp(inner / 3.0).sum(axis=1)


FORMULAS = {
    "gauss_sum_sq": _gauss_sum_sq,
    "tanh_quartic": _tanh_quartic,
    "exp_mixture": _exp_mixture,
}


def formula_value(formula_id: str, x) -> np.ndarray:
    if formula_id not in FORMULAS:
        raise DataError(f"unknown formula {formula_id!r}; choose from {sorted(FORMULAS)}")
    return FORMULAS[formula_id](np.atleast_2d(np.asarray(x, dtype=float)))


def gen_formula(formula_id: str, n: int = 3, count: int = 1000, box=(-1.0, 1.0),
                seed: int = 0) -> Dataset:
    """Inputs uniform in ``box^n`` with exact targets of a symmetric formula."""
    if formula_id not in FORMULAS:
        raise DataError(f"unknown formula {formula_id!r}; choose from {sorted(FORMULAS)}")
    rng = make_rng(seed)
    x = rng.uniform(box[0], box[1], (count, n))
    y = FORMULAS[formula_id](x)
    meta = {"task": "formula", "formula": formula_id, "n": n, "box": list(box), "seed": seed,
            "sample_shape": [n], "group": f"S({n})"}
    return Dataset(x[:, :, None], y, meta)


# ---------------------------------------------------------------------------
# 2-D point sets
# ---------------------------------------------------------------------------


def _shape_points(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "circle":
        a = rng.uniform(0, 2 * np.pi, n)
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    if kind == "two_moons":
        a = rng.uniform(0, np.pi, n)
        upper = rng.random(n) < 0.5
        pts = np.stack([np.cos(a), np.sin(a)], axis=1)
        low = np.stack([1.0 - np.cos(a), 0.5 - np.sin(a)], axis=1)
        pts = np.where(upper[:, None], pts, low)
        return pts - np.array([0.5, 0.25])
    if kind == "square":
        s = rng.uniform(-1, 1, n)
        side = rng.integers(0, 4, n)
        pts = np.empty((n, 2))
        pts[side == 0] = np.stack([s[side == 0], -np.ones((side == 0).sum())], axis=1)
        pts[side == 1] = np.stack([s[side == 1], np.ones((side == 1).sum())], axis=1)
        pts[side == 2] = np.stack([-np.ones((side == 2).sum()), s[side == 2]], axis=1)
        pts[side == 3] = np.stack([np.ones((side == 3).sum()), s[side == 3]], axis=1)
        return pts
    raise DataError(f"unknown shape {kind!r}")


def gen_set_classification(n: int = 16, count: int = 300, seed: int = 0,
                           noise: float = 0.05) -> Dataset:
    """Sets of ``n`` 2-D points from a circle, two moons or a square outline."""
    rng = make_rng(seed)
    labels = _balanced_labels(count, 3, rng)
    x = np.stack([_shape_points(SHAPE_CLASSES[c], n, rng) for c in labels]) \
        if count else np.zeros((0, n, 2))
    x = x + rng.normal(0.0, 1.0, x.shape) * noise
    meta = {"task": "sets", "n": n, "noise": noise, "seed": seed, "sample_shape": [n, 2],
            "group": f"S({n})", "layout": "set"}
    return Dataset(x, labels.astype(np.int64), meta)
