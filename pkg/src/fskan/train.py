"""Losses, the spline regularizer, AdamW and the training loop."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import KABank
from .network import Network


class TrainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    k = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise TrainError(f"labels must lie in [0, {k})")
    if not np.all(np.isfinite(logits)):
        raise TrainError("non-finite logits")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    m = len(labels)
    loss = float(np.mean(lse - z[np.arange(m), labels]))
    grad = np.exp(z - lse[:, None])
    grad[np.arange(m), labels] -= 1.0
    return loss, grad / m


def loss_mse(pred: np.ndarray, target: np.ndarray):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float).reshape(pred.shape)
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _kabanks(net: Network):
    for b, block in enumerate(net.blocks):
        bank = getattr(block.layer, "bank", None)
        if isinstance(bank, KABank):
            yield b, bank


def reg_penalty(net: Network, eta: float = 1.0):
    """Spline-magnitude plus entropy regularizer, scaled by ``eta``.

    Per layer, ``l1[f] = mean_k |c_fk|`` for every shared function ``f``;
    the penalty is ``sum l1 + entropy(l1 / sum l1)``, summed over layers.
    """
    value, grads = 0.0, {}
    for b, bank in _kabanks(net):
        c = bank.coeffs
        K = c.shape[-1]
        l1 = np.abs(c).mean(axis=-1)
        act = l1.sum()
        g = np.zeros_like(c)
        if act > 0:
            p = l1 / act
            nz = p > 0
            logp = np.zeros_like(p)
            logp[nz] = np.log(p[nz])
            ent = float(-(p[nz] * logp[nz]).sum())
            dl1 = 1.0 + np.where(nz, (-logp - ent) / act, 0.0)
            g = eta * dl1[..., None] * np.sign(c) / K
            value += float(act) + ent
        grads[f"b{b}.coeffs"] = g
    return eta * value, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(opt: OptimizerState, params: dict, grads: dict) -> dict:
    """One AdamW update (decoupled weight decay), applied in place."""
    opt.step += 1
    b1, b2 = opt.betas
    lr = opt.learning_rate
    c1, c2 = 1.0 - b1**opt.step, 1.0 - b2**opt.step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise TrainError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        m, v = opt.m[name], opt.v[name]
        if m.shape != p.shape:
            raise TrainError(f"moment shape mismatch for {name}")
        if opt.weight_decay:
            p *= 1.0 - lr * opt.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    reg_coeff: float = 1e-2
    weight_decay: float = 0.01
    seed: int = 0
    task: str = "classification"
    aggregation: str = "sum"
    widths: tuple = (16, 16, 8)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise TrainError("learning_rate must be positive")
        if self.task not in ("classification", "regression"):
            raise TrainError(f"unknown task {self.task!r}")
        self.widths = tuple(int(w) for w in self.widths)


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_score: float


def _loss(task, out, y):
    """Loss and gradient with respect to the full network output."""
    if task == "classification":
        return loss_cross_entropy(out, y)
    # regression reads the first output channel
    loss, g = loss_mse(out[:, 0], y)
    full = np.zeros_like(out)
    full[:, 0] = g
    return loss, full


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, task: str = "classification",
             chunk: int = 512) -> dict:
    """Loss plus accuracy (classification) or RMSE (regression) in eval mode."""
    outs = [net.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)]
    out = np.concatenate(outs, axis=0)
    if task == "classification":
        loss, _ = loss_cross_entropy(out, y)
        return {"loss": loss, "accuracy": float(np.mean(out.argmax(axis=1) == y))}
    loss, _ = loss_mse(out[:, 0], y)
    return {"loss": loss, "rmse": float(np.sqrt(loss))}


def _snapshot(net: Network):
    params = {k: v.copy() for k, v in net.params().items()}
    stats = [(b.norm.running_mean.copy(), b.norm.running_var.copy()) if b.norm else None
             for b in net.blocks]
    return params, stats


def _restore(net: Network, snap):
    params, stats = snap
    for k, v in net.params().items():
        v[...] = params[k]
    for b, s in zip(net.blocks, stats):
        if s is not None:
            b.norm.running_mean, b.norm.running_var = s[0].copy(), s[1].copy()
    net.mark_updated()


def train_run(net: Network, train, val, config: TrainConfig, metrics_path=None,
              on_epoch=None) -> TrainResult:
    """Minibatch AdamW training; restores the parameters of the best validation epoch.

    ``train`` and ``val`` are ``(x, y)`` pairs.  The run is a pure function of
    the network's initial state, the data and ``config`` (``wall_ms`` aside).
    """
    xt, yt = np.asarray(train[0], dtype=float), np.asarray(train[1])
    xv, yv = np.asarray(val[0], dtype=float), np.asarray(val[1])
    if len(xt) == 0:
        raise TrainError("empty training set")
    task = config.task
    if task == "classification":
        yt, yv = yt.astype(np.int64), yv.astype(np.int64)
    rng = np.random.Generator(np.random.Philox(config.seed))
    opt = OptimizerState(config.learning_rate, weight_decay=config.weight_decay)
    history = []
    best, best_epoch, snap = -np.inf, 0, _snapshot(net)
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(xt))
            tot, correct = 0.0, 0
            for s in range(0, len(xt), config.batch_size):
                idx = order[s:s + config.batch_size]
                out, cache = net.forward_train(xt[idx])
                loss, g = _loss(task, out, yt[idx])
                grads = net.backward(cache, g)
                if config.reg_coeff:
                    reg, rgrads = reg_penalty(net, config.reg_coeff)
                    loss += reg
                    for k, v in rgrads.items():
                        grads[k] = grads[k] + v
                adam_step(opt, net.params(), grads)
                net.mark_updated()
                tot += loss * len(idx)
                if task == "classification":
                    correct += int(np.sum(out.argmax(axis=1) == yt[idx]))
            ev = evaluate(net, xv, yv, task) if len(xv) else {"loss": float("nan")}
            rec = {"epoch": epoch, "train_loss": tot / len(xt), "val_loss": ev["loss"]}
            if task == "classification":
                rec["train_acc"] = correct / len(xt)
                rec["val_acc"] = ev.get("accuracy", float("nan"))
                score = rec["val_acc"]
            else:
                rec["val_acc"] = None
                score = -ev["loss"]
            rec["wall_ms"] = (time.perf_counter() - t0) * 1e3
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if on_epoch:
                on_epoch(rec)
            if len(xv) == 0 or score > best:
                best, best_epoch, snap = score, epoch, _snapshot(net)
    finally:
        if fh:
            fh.close()
    _restore(net, snap)
    return TrainResult(history, best_epoch, float(best))


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["widths"] = list(d["widths"])
    return d
