"""Command line entry point.

Subcommands: gen, train, eval, gradcheck, equiv, viz.
Exit codes: 0 success, 1 usage error, 2 runtime failure or divergence,
3 check failure (gradcheck/equiv found a violation).
"""

import argparse
import os
import sys

import numpy as np

from . import data as D
from . import layers as L
from . import viz as V
from .models import build_model, checkpoint_digest, load_checkpoint, save_checkpoint
from .smoother import PatchGrid
from .tensor import Rng
from .train import DivergenceError, TrainConfig, format_record, grad_check, train_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3

GRADCHECK_TOL = 1e-5
EQUIV_TOL = 1e-12


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser():
    p = _Parser(prog="lsnn", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a benchmark dataset")
    g.add_argument("--task", required=True, choices=D.TASKS)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--train", type=int, default=10000, dest="n_train")
    g.add_argument("--test", type=int, default=2000, dest="n_test")
    g.add_argument("--digits", default="digits",
                   help="directory with MNIST-format IDX digit files")
    g.add_argument("--synth-pool", action="store_true",
                   help="render a synthetic digit pool into --digits if missing")
    g.add_argument("--out", default=".")

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True, help="training .lsds file")
    t.add_argument("--eval-data", default=None,
                   help="evaluation .lsds file (default: train file with "
                        "'train' replaced by 'test')")
    t.add_argument("--model", required=True,
                   choices=["cnn", "local", "lsnn-location", "lsnn-content"])
    t.add_argument("--out", default=".")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--momentum", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--config", default=None, help="key=value defaults file")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check")
    c.add_argument("--model", required=True,
                   choices=["cnn", "local", "lsnn-location", "lsnn-content",
                            "lsnn-free", "lsnn-ones"])
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--samples", type=int, default=100)

    q = sub.add_parser("equiv", help="run the reduction property checks")
    q.add_argument("--seed", type=int, default=1)
    q.add_argument("--instances", type=int, default=50)

    v = sub.add_parser("viz", help="export smoother heatmaps as PGM files")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--indices", default="0", help="comma-separated sample indices")
    v.add_argument("--out", default=".")
    return p


# ---------------------------------------------------------------------------


def cmd_gen(args):
    if args.synth_pool:
        missing = any(
            not os.path.exists(os.path.join(args.digits, n)) and
            not os.path.exists(os.path.join(args.digits, n + ".gz"))
            for n in D.MNIST_FILES.values())
        if missing:
            print(f"rendering synthetic digit pool into {args.digits} ...")
            D.write_synth_pool(args.digits)
    pools = D.load_digit_pools(args.digits)
    os.makedirs(args.out, exist_ok=True)
    for split, count, seed in (("train", args.n_train, args.seed),
                               ("test", args.n_test, args.seed + 1)):
        cfg = D.GeneratorConfig.default(args.task, seed, count)
        samples = D.gen_dataset(cfg, pools[split])
        path = os.path.join(args.out, f"{args.task}_{split}.lsds")
        D.save_dataset(path, cfg, samples)
        counts = np.zeros(10, dtype=int)
        for s in samples:
            for c in s.labels:
                counts[c] += 1
        print(f"{path}: {count} samples, per-class counts {counts.tolist()}")
    return EXIT_OK


def _load_config_file(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _train_config(args):
    cfg = TrainConfig()
    if args.config:
        file_vals = _load_config_file(args.config)
        casts = {"epochs": int, "batch_size": int, "base_lr": float,
                 "momentum": float, "seed": int, "eval_every": int}
        for k, v in file_vals.items():
            if k not in casts:
                raise UsageError(f"unknown config key {k!r}")
            setattr(cfg, k, casts[k](v))
    for attr, val in (("epochs", args.epochs), ("batch_size", args.batch_size),
                      ("base_lr", args.lr), ("momentum", args.momentum),
                      ("seed", args.seed)):
        if val is not None:
            setattr(cfg, attr, val)
    return cfg


def cmd_train(args):
    task, header, samples = D.load_dataset(args.data)
    x, y, _ = D.dataset_arrays(samples)
    eval_path = args.eval_data
    if eval_path is None:
        eval_path = args.data.replace("train", "test")
        if eval_path == args.data or not os.path.exists(eval_path):
            raise UsageError("cannot infer --eval-data; pass it explicitly")
    _, _, eval_samples = D.load_dataset(eval_path)
    xe, ye, _ = D.dataset_arrays(eval_samples)

    cfg = _train_config(args)
    groups = 3 if task == "sequence" else 1
    fc_width = 512 if task == "sequence" else 256
    model = build_model(args.model, seed=cfg.seed, input_shape=x.shape[1:],
                        groups=groups, fc_width=fc_width)
    os.makedirs(args.out, exist_ok=True)
    stem = f"{args.model}_{task}"
    log_path = os.path.join(args.out, stem + ".log")
    with open(log_path, "w") as log_fh:
        records = train_model(model, (x, y), (xe, ye), cfg, log_fh=log_fh)
    ckpt = os.path.join(args.out, stem + ".ckpt")
    save_checkpoint(ckpt, model, extra={"task": task})
    final = [r for r in records if r["split"] == "eval"][-1]
    print(format_record(final))
    print(f"checkpoint {ckpt} sha256={checkpoint_digest(ckpt)}")
    return EXIT_OK


def cmd_eval(args):
    model, meta = load_checkpoint(args.checkpoint)
    _, _, samples = D.load_dataset(args.data)
    x, y, _ = D.dataset_arrays(samples)
    loss, err = model.evaluate(x, y)
    print(f"loss={loss:.6f} error={err:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    rng = Rng(args.seed)
    groups = 1
    model = build_model(args.model, seed=args.seed, groups=groups)
    x = rng.child("x").random((2, *model.meta["input_shape"]))
    y = rng.child("y").integers(0, 10, (2, groups))
    report = grad_check(model, x, y, n_samples=args.samples, rng=rng)
    print(report.summary())
    if report.max_rel >= GRADCHECK_TOL:
        for e in report.worst():
            print(f"  worst: {e.param}[{e.index}] analytic={e.analytic:.6e} "
                  f"numeric={e.numeric:.6e} rel={e.rel_error:.3e}")
        return EXIT_CHECK
    return EXIT_OK


def run_equivalence_checks(seed=1, instances=50, h=9, w=9, k=3):
    """Reduction properties on random instances.

    Returns (ok, max_conv_delta, max_rank1_delta, rank2_residual)."""
    rng = Rng(seed)
    max_conv = max_rank1 = 0.0
    m = (h - k + 1) * (w - k + 1)
    for i in range(instances):
        r = rng.child("inst", i)
        x = r.normal(size=(h, w))
        v = r.normal(size=k * k)
        unrolled = L.extract_patches(x, k)
        ones = L.LsnnWeights(np.ones(m), v)
        delta = np.max(np.abs(L.lsnn_forward(unrolled, ones) -
                              L.conv_forward(x, v.reshape(k, k))))
        max_conv = max(max_conv, delta)
        u = r.normal(size=m)
        w_mat = np.outer(u, v)
        delta = np.max(np.abs(L.local_forward(x, w_mat) -
                              L.lsnn_forward(unrolled, L.LsnnWeights(u, v))))
        max_rank1 = max(max_rank1, delta)
    # rank-2 counterexample: the best rank-1 fit leaves a residual
    r = rng.child("rank2")
    w2 = (np.outer(r.normal(size=m), r.normal(size=k * k)) +
          np.outer(r.normal(size=m), r.normal(size=k * k)))
    uu, ss, vv = np.linalg.svd(w2, full_matrices=False)
    best1 = ss[0] * np.outer(uu[:, 0], vv[0])
    residual = float(np.linalg.norm(w2 - best1))
    ok = max_conv < EQUIV_TOL and max_rank1 < EQUIV_TOL and residual > 1e-6
    return ok, max_conv, max_rank1, residual


def cmd_equiv(args):
    ok, max_conv, max_rank1, residual = run_equivalence_checks(
        args.seed, args.instances)
    print(f"ones-smoother vs conv: max |delta| = {max_conv:.3e} "
          f"({'PASS' if max_conv < EQUIV_TOL else 'FAIL'})")
    print(f"rank-1 local vs free-smoother: max |delta| = {max_rank1:.3e} "
          f"({'PASS' if max_rank1 < EQUIV_TOL else 'FAIL'})")
    print(f"rank-2 weight matrix: best rank-1 residual = {residual:.3e} "
          f"(nonzero as expected)")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_viz(args):
    model, meta = load_checkpoint(args.checkpoint)
    if meta["kind"] not in ("lsnn-location", "lsnn-content", "lsnn-free"):
        raise UsageError(f"checkpoint model {meta['kind']} has no smoothers")
    _, _, samples = D.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for idx in (int(i) for i in args.indices.split(",")):
        if not 0 <= idx < len(samples):
            raise UsageError(f"sample index {idx} out of range")
        written += V.export_viz(model, samples[idx].pixels, args.out,
                                f"sample{idx:04d}")
    print(f"wrote {len(written)} PGM files to {args.out}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "equiv": cmd_equiv, "viz": cmd_viz}


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.cmd](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
