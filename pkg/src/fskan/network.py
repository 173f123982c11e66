"""Networks built from FS-KA layers: blocks, batch norm, builders and model files."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .layers import (
    EfficientFSKALayer,
    FSInvariantLayer,
    FSKALayer,
    LayerError,
    ka_layer,
    layer_from_dict,
)
from .permgroup import GroupSpec, parse_group
from .spline import SplineConfig

MODEL_FORMAT = "fskan-model"
MODEL_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


class NormState:
    """Batch norm over ``(batch, positions)`` per channel, with affine scale and shift.

    Sharing the statistics across positions keeps the map equivariant.
    """

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        self.d, self.momentum, self.eps = d, momentum, eps
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)
        self.gamma = np.ones(d)
        self.beta = np.zeros(d)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward_cache(self, x: np.ndarray, train: bool, update: bool = True):
        if train:
            flat = x.reshape(-1, self.d)
            m = flat.shape[0]
            mean = flat.mean(axis=0)
            var = flat.var(axis=0)
            if update:
                unbiased = var * m / max(m - 1, 1)
                self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
                self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        return self.gamma * xhat + self.beta, (xhat, inv, train)

    def backward(self, cache, g: np.ndarray):
        xhat, inv, train = cache
        gf, xf = g.reshape(-1, self.d), xhat.reshape(-1, self.d)
        grads = {"gamma": (gf * xf).sum(axis=0), "beta": gf.sum(axis=0)}
        gxhat = g * self.gamma
        if not train:
            return gxhat * inv, grads
        m = xf.shape[0]
        gh = gxhat.reshape(-1, self.d)
        gx = inv / m * (m * gh - gh.sum(axis=0) - xf * (gh * xf).sum(axis=0))
        return gx.reshape(g.shape), grads

    def to_dict(self):
        return {k: getattr(self, k).tolist() if isinstance(getattr(self, k), np.ndarray)
                else getattr(self, k)
                for k in ("d", "momentum", "eps", "running_mean", "running_var", "gamma", "beta")}

    @classmethod
    def from_dict(cls, d):
        s = cls(int(d["d"]), float(d["momentum"]), float(d["eps"]))
        for k in ("running_mean", "running_var", "gamma", "beta"):
            setattr(s, k, np.array(d[k], dtype=float))
        return s


@dataclass
class Block:
    layer: object
    norm: NormState | None = None
    activation: str | None = None

    def __post_init__(self):
        if self.activation not in (None, "relu"):
            raise LayerError(f"unsupported activation {self.activation!r}")


# extra layer kinds (e.g. linear layers of parameter-sharing MLPs) register here
LAYER_REGISTRY: dict = {}


def _load_layer(d):
    kind = d.get("kind")
    if kind in LAYER_REGISTRY:
        return LAYER_REGISTRY[kind].from_dict(d)
    return layer_from_dict(d)


class Network:
    """A chain of blocks ``layer -> norm -> activation``.

    ``invariant`` networks end with a single position whose features are the
    output (shape ``(batch, d_out)``); otherwise the output keeps its positions.
    """

    family = "fskan"

    def __init__(self, group: GroupSpec, blocks: list[Block], invariant: bool = True):
        self.group = group
        self.blocks = list(blocks)
        self.invariant = invariant
        self.version = 0

    # parameters -----------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for b, block in enumerate(self.blocks):
            for k, v in block.layer.params().items():
                out[f"b{b}.{k}"] = v
            if block.norm is not None:
                for k, v in block.norm.params().items():
                    out[f"b{b}.norm.{k}"] = v
        return out

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params().values()))

    def mark_updated(self):
        """Invalidate caches after an in-place parameter change."""
        self.version += 1

    # forward / backward -----------------------------------------------------

    def forward_cache(self, x: np.ndarray, train: bool = False, update_stats: bool = True):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[:, :, None]
        h = x
        caches = []
        for block in self.blocks:
            h, lc = block.layer.forward_cache(h)
            nc = None
            if block.norm is not None:
                h, nc = block.norm.forward_cache(h, train, update_stats)
            mask = None
            if block.activation == "relu":
                mask = h > 0
                h = h * mask
            caches.append((lc, nc, mask))
        out = h[:, 0, :] if self.invariant else h
        return out, {"version": self.version, "blocks": caches, "invariant": self.invariant}

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluation-mode forward pass (running batch-norm statistics)."""
        return self.forward_cache(x, train=False)[0]

    __call__ = forward

    def forward_train(self, x: np.ndarray):
        return self.forward_cache(x, train=True, update_stats=True)

    def backward(self, cache, gout: np.ndarray, with_input: bool = False):
        """Parameter gradients (and the input gradient when ``with_input``)."""
        if cache["version"] != self.version:
            raise StaleCacheError("cache was produced before the last parameter update")
        g = np.asarray(gout, dtype=float)
        if cache["invariant"]:
            g = g[:, None, :]
        grads = {}
        for b in range(len(self.blocks) - 1, -1, -1):
            block = self.blocks[b]
            lc, nc, mask = cache["blocks"][b]
            if mask is not None:
                g = g * mask
            if nc is not None:
                g, ng = block.norm.backward(nc, g)
                for k, v in ng.items():
                    grads[f"b{b}.norm.{k}"] = v
            g, lg = block.layer.backward(lc, g)
            for k, v in lg.items():
                grads[f"b{b}.{k}"] = v
        if with_input:
            return grads, g
        return grads

    # structure -------------------------------------------------------------

    def layers(self):
        return [b.layer for b in self.blocks]

    def at_size(self, size) -> Network:
        """Network on a resized domain sharing all parameters and norm states."""
        blocks = []
        for block in self.blocks:
            layer = block.layer
            if getattr(layer, "k_in", 0) > 0 and layer.group.degree != 1:
                layer = layer.at_size(size)
            blocks.append(Block(layer, block.norm, block.activation))
        group = blocks[0].layer.group if blocks else self.group
        net = type(self).__new__(type(self))
        Network.__init__(net, group, blocks, self.invariant)
        return net

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "family": self.family,
            "group": str(self.group),
            "invariant": self.invariant,
            "blocks": [
                {"layer": b.layer.to_dict(),
                 "norm": None if b.norm is None else b.norm.to_dict(),
                 "activation": b.activation}
                for b in self.blocks
            ],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    def __repr__(self):
        inner = ", ".join(repr(b.layer) for b in self.blocks)
        return f"{type(self).__name__}({self.group}; {inner})"


class FSKANetwork(Network):
    family = "fskan"


def network_from_dict(d: dict) -> Network:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError("not a model file")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')!r}")
    family = d.get("family")
    if family == "ps-mlp":
        from .expressivity import ParamSharingMLP  # noqa: F401  (registers the linear kind)
        cls = ParamSharingMLP
    elif family == "fskan":
        cls = FSKANetwork
    else:
        raise ValueError(f"unknown model family {family!r}")
    blocks = [Block(_load_layer(b["layer"]),
                    None if b["norm"] is None else NormState.from_dict(b["norm"]),
                    b["activation"]) for b in d["blocks"]]
    net = cls.__new__(cls)
    Network.__init__(net, parse_group(d["group"]), blocks, bool(d["invariant"]))
    return net


def load_network(path) -> Network:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def build_fskan(group: GroupSpec | str, d_in: int, widths, d_out: int, *,
                layer_kind: str = "fs", aggregation: str = "sum", norm: bool = True,
                invariant: bool = True, spline: SplineConfig | None = None,
                invariant_spline: SplineConfig | None = None,
                head_spline: SplineConfig | None = None,
                rng: np.random.Generator | None = None) -> FSKANetwork:
    """Equivariant layers (each with batch norm), an invariant layer and a KA readout.

    ``widths`` lists the equivariant widths followed by the invariant width.
    Without ``invariant`` all widths are equivariant and a final equivariant
    layer maps to ``d_out`` channels.
    """
    if isinstance(group, str):
        group = parse_group(group)
    rng = rng if rng is not None else np.random.default_rng(0)
    spline = spline or SplineConfig()
    cls = {"fs": FSKALayer, "efficient": EfficientFSKALayer}.get(layer_kind)
    if cls is None:
        raise LayerError(f"unknown layer kind {layer_kind!r}")
    widths = list(widths)
    blocks = []
    d = d_in
    eq_widths = widths[:-1] if invariant else widths
    for w in eq_widths:
        blocks.append(Block(cls(group, d, w, aggregation=aggregation, spline=spline, rng=rng),
                            NormState(w) if norm else None))
        d = w
    if invariant:
        w = widths[-1]
        blocks.append(Block(FSInvariantLayer(group, d, w, aggregation=aggregation,
                                             spline=invariant_spline or spline, rng=rng),
                            NormState(w) if norm else None))
        blocks.append(Block(ka_layer(w, d_out, head_spline or spline, rng)))
    else:
        blocks.append(Block(cls(group, d, d_out, aggregation=aggregation, spline=spline, rng=rng)))
    return FSKANetwork(group, blocks, invariant)
