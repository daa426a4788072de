"""Desk-scale benchmark runs: all model kinds on one generated task.

Training jobs are independent, so they run two at a time in spawned
single-threaded worker processes (see _worker).  Everything is keyed by
explicit seeds; rerunning a benchmark with the same arguments reproduces
identical logs and checkpoint hashes.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context

from . import data as D
from ._worker import train_job

BENCH_KINDS = ("cnn", "local", "lsnn-location", "lsnn-content")


def make_task_data(task, pools, n_train, n_test, seed):
    """Generate train/test splits for a task from digit pools.

    Train samples draw from the train digit pool, test samples from the
    held-out test pool, with split-specific generator seeds.
    """
    cfg_tr = D.GeneratorConfig.default(task, seed, n_train)
    cfg_te = D.GeneratorConfig.default(task, seed + 1, n_test)
    train = D.dataset_arrays(D.gen_dataset(cfg_tr, pools["train"]))
    test = D.dataset_arrays(D.gen_dataset(cfg_te, pools["test"]))
    return train, test


def run_benchmark(task, pools, out_dir, kinds=BENCH_KINDS, n_train=10000,
                  n_test=2000, epochs=20, data_seed=100, train_seed=1,
                  batch_size=64, base_lr=0.01, momentum=0.9, eval_every=1,
                  workers=2, group_mu_init=None, progress=None):
    """Train every kind on one task; returns {kind: result dict}.

    result: final_error, records (per-epoch log), checkpoint path + sha256.
    """
    (x, y, _), (xe, ye, _) = make_task_data(task, pools, n_train, n_test,
                                            data_seed)
    os.makedirs(out_dir, exist_ok=True)
    payloads = []
    for kind in kinds:
        payloads.append({
            "task": task, "kind": kind, "x": x, "y": y, "xe": xe, "ye": ye,
            "epochs": epochs, "batch_size": batch_size, "base_lr": base_lr,
            "momentum": momentum, "seed": train_seed, "eval_every": eval_every,
            "group_mu_init": group_mu_init,
            "out_path": os.path.join(out_dir, f"{kind}_{task}.ckpt"),
        })
    results = {}
    if workers <= 1:
        for p in payloads:
            results[p["kind"]] = train_job(p)
            if progress:
                progress(results[p["kind"]])
    else:
        ctx = get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = {pool.submit(train_job, p): p["kind"] for p in payloads}
            for fut, kind in futures.items():
                results[kind] = fut.result()
                if progress:
                    progress(results[kind])
    return results


def error_table(results):
    lines = [f"{kind:15s} error={res['final_error']:.4f}"
             for kind, res in results.items()]
    return "\n".join(lines)
