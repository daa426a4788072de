"""Model assembly for the benchmark tasks, plus checkpoint I/O.

Every model is: a first layer (conv, locally connected, or locally
smoothed), then a fixed trunk of conv/pool/dense layers ending in class
logits.  Multi-target models run G first-layer groups through the same
trunk, one loss head per group; a sample then counts as G predictions.

Checkpoint layout: a little-endian u32 manifest length, a UTF-8 text
manifest (comment lines `# key=value` describing how to rebuild the
model, then one `name<TAB>kind<TAB>shape` line per tensor), followed by
the tensors in manifest order in the LSTN format.
"""

import hashlib
import struct

import numpy as np

from .layers import softmax_xent
from .network import (Conv2D, Dense, Dropout, FirstConv, FirstLocal,
                      FirstSmoothed, Flatten, MaxPool2, ReLU)
from .tensor import Rng, read_tensor, write_tensor

MODEL_KINDS = ("cnn", "local", "lsnn-location", "lsnn-content",
               "lsnn-free", "lsnn-ones")

L1_FILTERS = 16
L1_KERNEL = 7
L2_FILTERS = 32
L2_KERNEL = 5
DROPOUT_RATE = 0.5


class Classifier:
    """Grouped first layer + shared trunk + one softmax head per group."""

    def __init__(self, first, trunk, groups=1):
        self.first = first
        self.trunk = trunk
        self.groups = groups

    def params(self):
        out = list(self.first.params())
        for layer in self.trunk:
            out.extend(layer.params())
        return out

    def zero_grads(self):
        for p in self.params():
            p.grad[:] = 0.0

    def _labels(self, y):
        y = np.asarray(y)
        return y[:, None] if y.ndim == 1 else y

    @staticmethod
    def _to_cl(x):
        # dataset convention (B, C, H, W) -> channels-last for the layers
        return np.ascontiguousarray(np.transpose(x, (0, 2, 3, 1)))

    def loss_and_grads(self, x, y, rng=None, train=True):
        """Forward and backward over all groups; gradients accumulate into
        the params.  Returns (total loss, correct predictions, predictions).
        """
        y2 = self._labels(y)
        self.first.begin(self._to_cl(x), train)
        total, correct = 0.0, 0
        for g in range(self.groups):
            h = self.first.group_forward(g)
            for layer in self.trunk:
                h = layer.forward(h, train, rng)
            loss, dlogits = softmax_xent(h, y2[:, g])
            total += loss
            correct += int((h.argmax(axis=1) == y2[:, g]).sum())
            d = dlogits
            for layer in reversed(self.trunk):
                d = layer.backward(d)
            self.first.group_backward(g, d)
        self.first.end_backward()
        return total, correct, y2.size

    def loss_only(self, x, y, hasher=None):
        """Eval-mode loss without backward.  When hasher is given, every
        relu/pool decision pattern is folded in, so two calls with the
        same hash took the same linear region."""
        y2 = self._labels(y)
        self.first.begin(self._to_cl(x), train=False)
        if hasher is not None:
            for pat in self.first.patterns():
                if pat is not None:
                    hasher.update(pat)
        total = 0.0
        for g in range(self.groups):
            h = self.first.group_forward(g)
            for layer in self.trunk:
                h = layer.forward(h, train=False)
                if hasher is not None:
                    pat = layer.pattern()
                    if pat is not None:
                        hasher.update(pat)
            loss, _ = softmax_xent(h, y2[:, g])
            total += loss
        return total

    def predict(self, x):
        """Eval-mode class predictions, shape (B, groups)."""
        self.first.begin(self._to_cl(x), train=False)
        cols = []
        for g in range(self.groups):
            h = self.first.group_forward(g)
            for layer in self.trunk:
                h = layer.forward(h, train=False)
            cols.append(h.argmax(axis=1))
        return np.stack(cols, axis=1)

    def evaluate(self, x, y, batch_size=250):
        """Mean loss and prediction error rate over a dataset."""
        y2 = self._labels(y)
        n = x.shape[0]
        loss_sum, wrong, preds = 0.0, 0, 0
        for lo in range(0, n, batch_size):
            xb, yb = x[lo:lo + batch_size], y2[lo:lo + batch_size]
            self.first.begin(self._to_cl(xb), train=False)
            for g in range(self.groups):
                h = self.first.group_forward(g)
                for layer in self.trunk:
                    h = layer.forward(h, train=False)
                loss, _ = softmax_xent(h, yb[:, g])
                loss_sum += loss * xb.shape[0]
                wrong += int((h.argmax(axis=1) != yb[:, g]).sum())
                preds += xb.shape[0]
        return loss_sum / n, wrong / preds


def build_model(kind, seed=0, input_shape=(1, 42, 42), n_classes=10, groups=1,
                fc_width=256, normalize=True, factor_rank=1, group_mu_init=None):
    """Construct a benchmark model.

    kind: cnn | local | lsnn-location | lsnn-content | lsnn-free | lsnn-ones.
    The lsnn-free/lsnn-ones kinds exist for equivalence and gradient tests.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    rng = Rng(seed).child("init")
    c, h, w = input_shape
    if kind == "cnn":
        first = FirstConv(input_shape, L1_FILTERS, L1_KERNEL, rng, groups)
    elif kind == "local":
        first = FirstLocal(input_shape, L1_FILTERS, L1_KERNEL, rng, groups)
    else:
        mode = {"lsnn-location": "location", "lsnn-content": "content",
                "lsnn-free": "free", "lsnn-ones": "ones"}[kind]
        first = FirstSmoothed(input_shape, L1_FILTERS, L1_KERNEL, rng, mode=mode,
                              groups=groups, d=factor_rank, normalize=normalize,
                              group_mu_init=group_mu_init)
    oh, ow = first.out_hw
    if oh % 2 or ow % 2:
        raise ValueError(f"first layer output {oh}x{ow} does not pool evenly")
    h2, w2 = oh // 2 - L2_KERNEL + 1, ow // 2 - L2_KERNEL + 1
    if h2 % 2 or w2 % 2:
        raise ValueError(f"second layer output {h2}x{w2} does not pool evenly")
    flat = L2_FILTERS * (h2 // 2) * (w2 // 2)
    trunk = [
        ReLU(),
        MaxPool2(),
        Conv2D(L1_FILTERS, L2_FILTERS, L2_KERNEL, rng, "layer2"),
        ReLU(),
        MaxPool2(),
        Flatten(),
        Dense(flat, fc_width, rng, "fc1"),
        ReLU(),
        Dropout(DROPOUT_RATE),
        Dense(fc_width, n_classes, rng, "fc2"),
    ]
    model = Classifier(first, trunk, groups)
    model.meta = {
        "kind": kind, "seed": seed, "input_shape": input_shape,
        "n_classes": n_classes, "groups": groups, "fc_width": fc_width,
        "normalize": normalize, "factor_rank": factor_rank,
        "group_mu_init": group_mu_init,
    }
    return model


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model, extra=None):
    meta = dict(model.meta)
    if extra:
        meta.update(extra)
    params = model.params()
    lines = [f"# {k}={_meta_str(v)}" for k, v in sorted(meta.items())]
    lines += [f"{p.name}\t{p.kind}\t{','.join(map(str, p.data.shape))}" for p in params]
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for p in params:
            write_tensor(fh, p.data)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = fh.read(mlen).decode("utf-8").splitlines()
        meta, entries = {}, []
        for line in manifest:
            if line.startswith("# "):
                k, v = line[2:].split("=", 1)
                meta[k] = v
            elif line:
                name, kind, shape = line.split("\t")
                entries.append((name, kind, shape))
        model = build_model(
            meta["kind"], seed=int(meta["seed"]),
            input_shape=_meta_tuple(meta["input_shape"]),
            n_classes=int(meta["n_classes"]), groups=int(meta["groups"]),
            fc_width=int(meta["fc_width"]), normalize=meta["normalize"] == "True",
            factor_rank=int(meta["factor_rank"]),
            group_mu_init=None if meta["group_mu_init"] == "None"
            else np.array(_meta_tuple(meta["group_mu_init"], float)).reshape(-1, 2))
        params = model.params()
        if len(params) != len(entries):
            raise ValueError("checkpoint manifest does not match the rebuilt model")
        for p, (name, _, _) in zip(params, entries):
            if p.name != name:
                raise ValueError(f"parameter order mismatch: {p.name} vs {name}")
            data = read_tensor(fh)
            if data.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data[:] = data
        return model, meta


def checkpoint_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _meta_str(v):
    if isinstance(v, np.ndarray):
        return ",".join(repr(float(x)) for x in v.reshape(-1))
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _meta_tuple(s, cast=int):
    return tuple(cast(x) for x in s.split(","))
