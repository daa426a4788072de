"""SGD-with-momentum training loop and the finite-difference gradient checker."""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 0.01
    momentum: float = 0.9
    seed: int = 1
    eval_every: int = 1


class SgdMomentum:
    """Classical momentum: v <- momentum*v - lr*scale*g;  p <- p + v.

    Each parameter group applies its own lr_scale (the content smoother's
    parameter net runs at 0.1x the base rate)."""

    def __init__(self, params, base_lr, momentum):
        self.params = list(params)
        self.base_lr = base_lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in {p.name}")
            v *= self.momentum
            v -= self.base_lr * p.lr_scale * p.grad
            p.data += v

    def effective_lr(self, param):
        return self.base_lr * param.lr_scale


def format_record(rec):
    return (f"epoch={rec['epoch']} split={rec['split']} "
            f"loss={rec['loss']:.6f} error={rec['error']:.6f}")


def train_model(model, train_set, eval_set, cfg, log_fh=None, progress=None):
    """Train with per-epoch shuffling; fully deterministic given cfg.seed.

    train_set/eval_set: (images (N,C,H,W), labels (N,) or (N,G)) pairs.
    Returns the list of per-epoch records that also went to log_fh as
    `epoch=<i> split=<train|eval> loss=<f> error=<f>` lines.
    """
    x, y = train_set
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    rng = Rng(cfg.seed)
    opt = SgdMomentum(model.params(), cfg.base_lr, cfg.momentum)
    records = []

    def emit(rec):
        records.append(rec)
        if log_fh is not None:
            log_fh.write(format_record(rec) + "\n")
            log_fh.flush()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.child("shuffle", epoch).permutation(n)
        drop_rng = rng.child("dropout", epoch)
        loss_sum, correct, preds = 0.0, 0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            model.zero_grads()
            loss, c, m = model.loss_and_grads(x[idx], _take(y, idx), drop_rng,
                                              train=True)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}")
            opt.step()
            loss_sum += loss * len(idx)
            correct += c
            preds += m
        emit({"epoch": epoch, "split": "train", "loss": loss_sum / n,
              "error": 1.0 - correct / preds})
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            ev_loss, ev_err = model.evaluate(*eval_set)
            emit({"epoch": epoch, "split": "eval", "loss": ev_loss, "error": ev_err})
        if progress is not None:
            progress(epoch, records)
    return records


def _take(y, idx):
    y = np.asarray(y)
    return y[idx]


# ---------------------------------------------------------------------------
# Gradient checking


# Relative error uses |a - n| / max(|a| + |n|, REL_FLOOR): the floor makes
# near-zero gradients compare absolutely, below the scale where central
# differences on a double-precision loss still carry signal.
REL_FLOOR = 1e-3


@dataclass
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    skipped: int = 0

    @property
    def max_rel(self):
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def mean_rel(self):
        return float(np.mean([e.rel_error for e in self.entries])) if self.entries else 0.0

    def worst(self, k=5):
        return sorted(self.entries, key=lambda e: -e.rel_error)[:k]

    def summary(self):
        return (f"checked {len(self.entries)} parameters "
                f"(skipped {self.skipped} at kinks): "
                f"max rel err {self.max_rel:.3e}, mean {self.mean_rel:.3e}")


def rel_error(a, n, floor=REL_FLOOR):
    return abs(a - n) / max(abs(a) + abs(n), floor)


def grad_check(model, x, y, h=1e-6, n_samples=100, rng=None, floor=REL_FLOOR):
    """Compare analytic gradients against central finite differences.

    Runs in eval mode (dropout off).  Samples scalars uniformly across all
    trainable parameters.  A sample whose +h/-h evaluations land in
    different relu/max-pool decision patterns is skipped: the loss is not
    differentiable across that kink, so the comparison is meaningless there.
    """
    rng = rng or Rng(0)
    model.zero_grads()
    model.loss_and_grads(x, y, train=False)
    params = model.params()
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    cum = np.cumsum(sizes)
    n_samples = min(n_samples, total)
    flat_choice = np.sort(rng.child("gradcheck").integers(0, total, 4 * n_samples))
    flat_choice = np.unique(flat_choice)[:n_samples]

    report = GradCheckReport()
    for flat in flat_choice:
        pi = int(np.searchsorted(cum, flat, side="right"))
        i = int(flat - (cum[pi - 1] if pi else 0))
        p = params[pi]
        orig = p.data.flat[i]

        p.data.flat[i] = orig + h
        h1 = hashlib.sha1()
        l1 = model.loss_only(x, y, hasher=h1)
        p.data.flat[i] = orig - h
        h2 = hashlib.sha1()
        l2 = model.loss_only(x, y, hasher=h2)
        p.data.flat[i] = orig

        if h1.digest() != h2.digest():
            report.skipped += 1
            continue
        numeric = (l1 - l2) / (2.0 * h)
        ana = analytic[pi].flat[i]
        report.entries.append(GradCheckEntry(p.name, i, float(ana), float(numeric),
                                             rel_error(ana, numeric, floor)))
    return report
