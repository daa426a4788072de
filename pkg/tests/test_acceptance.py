"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Criteria 5-9 are desk-scale training experiments (10k train / 2k eval,
20 epochs per model); they carry the `experiment` marker and dominate the
suite's runtime.  Deselect them with `-m "not experiment"` for quick runs.
"""

import time

import numpy as np
import pytest

from conftest import rel_err
from lsnn import data as D
from lsnn import layers as L
from lsnn import viz as V
from lsnn.cli import run_equivalence_checks
from lsnn.experiments import make_task_data, run_benchmark
from lsnn.models import build_model, load_checkpoint
from lsnn.smoother import (GaussianParams, PatchGrid, normalized_backward,
                           smoother_backward, smoother_forward,
                           smoother_normalize)
from lsnn.tensor import Rng
from lsnn.train import grad_check

# experiment configuration (seeds and rates are fixed so reruns reproduce)
POOL_SEEDS = (90, 91)
POOL_SIZES = (15000, 3000)
DATA_SEED = 100
TRAIN_SEED = 1
N_TRAIN, N_TEST = 10000, 2000
EPOCHS = 20
BASE_LR = 0.05


def report(criterion, ok, detail):
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


@pytest.fixture(scope="session")
def bench_pools():
    return {"train": D.synth_digit_pool(POOL_SEEDS[0], POOL_SIZES[0]),
            "test": D.synth_digit_pool(POOL_SEEDS[1], POOL_SIZES[1])}


def _benchmark(task, pools, tmp_factory, tag, **kw):
    out = tmp_factory.mktemp(f"bench_{tag}")
    return run_benchmark(task, pools, out_dir=str(out), n_train=N_TRAIN,
                         n_test=N_TEST, epochs=EPOCHS, data_seed=DATA_SEED,
                         train_seed=TRAIN_SEED, base_lr=BASE_LR, **kw)


@pytest.fixture(scope="session")
def cluttered_results(bench_pools, tmp_path_factory):
    return _benchmark("cluttered", bench_pools, tmp_path_factory, "cluttered")


@pytest.fixture(scope="session")
def rect_results(bench_pools, tmp_path_factory):
    return _benchmark("rect", bench_pools, tmp_path_factory, "rect")


@pytest.fixture(scope="session")
def sequence_results(bench_pools, tmp_path_factory):
    return _benchmark("sequence", bench_pools, tmp_path_factory, "sequence")


def _errors(results):
    return {k: v["final_error"] for k, v in results.items()}


# ---------------------------------------------------------------------------
# Criterion 1: analytic gradients vs central finite differences


def _layer_instances():
    """Single-layer finite-difference checks, 20 random instances each."""
    rng = np.random.default_rng(1000)
    worst = {}

    def fd_scalar(f, arr, i, h=1e-6):
        p1, p2 = arr.copy(), arr.copy()
        p1.flat[i] += h
        p2.flat[i] -= h
        return (f(p1) - f(p2)) / (2 * h)

    # conv / local / lsnn variants
    for name in ("conv", "local", "lsnn-ones", "lsnn-free"):
        w = 0.0
        for _ in range(20):
            x = rng.normal(size=(6, 6))
            un = L.extract_patches(x, 3)
            m = un.patches.shape[0]
            up = rng.normal(size=m)
            if name == "conv":
                k = rng.normal(size=(3, 3))
                gk, _ = L.conv_backward(x, k, up)
                i = int(rng.integers(k.size))
                num = fd_scalar(lambda a: float(up @ L.conv_forward(x, a)), k, i)
                w = max(w, rel_err(gk.flat[i], num))
            elif name == "local":
                wm = rng.normal(size=(m, 9))
                gw, _ = L.local_backward(x, wm, up)
                i = int(rng.integers(wm.size))
                num = fd_scalar(lambda a: float(up @ L.local_forward(x, a)), wm, i)
                w = max(w, rel_err(gw.flat[i], num))
            else:
                u = np.ones(m) if name == "lsnn-ones" else rng.normal(size=m)
                v = rng.normal(size=9)
                lw = L.LsnnWeights(u, v)
                gu, gv, _ = L.lsnn_backward(un, lw, up)
                i = int(rng.integers(m))
                num = fd_scalar(lambda a: float(
                    up @ L.lsnn_forward(un, L.LsnnWeights(a[:, 0], v))), u[:, None], i)
                w = max(w, rel_err(gu.flat[i], num))
                i = int(rng.integers(9))
                num = fd_scalar(lambda a: float(
                    up @ L.lsnn_forward(un, L.LsnnWeights(u, a[:, 0]))), v[:, None], i)
                w = max(w, rel_err(gv.flat[i], num))
        worst[name] = w

    # maxpool (skip tie crossings), fc, losses
    w = 0.0
    checked = 0
    while checked < 20:
        x = rng.normal(size=(6, 6))
        up = rng.normal(size=(3, 3))
        out, idx = L.maxpool_forward(x)
        dx = L.maxpool_backward(up, idx, x.shape)
        i = int(rng.integers(x.size))
        p1, p2 = x.copy(), x.copy()
        p1.flat[i] += 1e-6
        p2.flat[i] -= 1e-6
        o1, i1 = L.maxpool_forward(p1)
        o2, i2 = L.maxpool_forward(p2)
        if not np.array_equal(i1, i2):
            continue
        num = (float((up * o1).sum()) - float((up * o2).sum())) / 2e-6
        w = max(w, rel_err(dx.flat[i], num))
        checked += 1
    worst["maxpool"] = w

    w = 0.0
    for _ in range(20):
        x = rng.normal(size=(4, 6))
        fw = rng.normal(size=(6, 3))
        b = rng.normal(size=3)
        up = rng.normal(size=(4, 3))
        gw, gb, _ = L.fc_backward(x, fw, up)
        i = int(rng.integers(fw.size))
        num = fd_scalar(lambda a: float((up * L.fc_forward(x, a, b)).sum()), fw, i)
        w = max(w, rel_err(gw.flat[i], num))
    worst["fc"] = w

    w = 0.0
    for _ in range(20):
        logits = rng.normal(size=(4, 7))
        labels = rng.integers(0, 7, 4)
        _, g = L.softmax_xent(logits, labels)
        i = int(rng.integers(logits.size))
        num = fd_scalar(lambda a: L.softmax_xent(a, labels)[0], logits, i)
        w = max(w, rel_err(g.flat[i], num))
        targets = (rng.random((4, 7)) < 0.5).astype(float)
        _, g = L.sigmoid_bce(logits, targets)
        num = fd_scalar(lambda a: L.sigmoid_bce(a, targets)[0], logits, i)
        w = max(w, rel_err(g.flat[i], num))
    worst["losses"] = w

    # raw and normalized smoother parameter gradients
    grid = PatchGrid.make(5, 6)
    for tag, normalized in (("smoother-raw", False), ("smoother-normalized", True)):
        w = 0.0
        for _ in range(20):
            params = GaussianParams(rng.uniform(-0.5, 1.5, 2),
                                    rng.uniform(-1.5, 1.5, 3))
            up = rng.normal(size=grid.size)
            raw = smoother_forward(params, grid)
            if normalized:
                gmu, gphi = normalized_backward(params, grid, raw, up)
            else:
                gmu, gphi = smoother_backward(params, grid, raw, up)

            def val(mu, phi):
                s = smoother_forward(GaussianParams(mu, phi), grid)
                v = smoother_normalize(s).values if normalized else s.values
                return float(up @ v)

            for i in range(2):
                num = fd_scalar(lambda a: val(a, params.phi), params.mu.copy(), i)
                w = max(w, rel_err(gmu[i], num))
            for i in range(3):
                num = fd_scalar(lambda a: val(params.mu, a), params.phi.copy(), i)
                w = max(w, rel_err(gphi[i], num))
        worst[tag] = w
    return worst


def test_c1_gradient_correctness():
    t0 = time.time()
    worst = _layer_instances()

    # composed models, >= 100 sampled parameters each, full input size
    rng = Rng(4242)
    x = rng.child("x").random((2, 1, 42, 42))
    y = rng.child("y").integers(0, 10, (2, 1))
    for kind in ("lsnn-location", "lsnn-content"):
        model = build_model(kind, seed=11)
        rep = grad_check(model, x, y, n_samples=100, rng=rng.child(kind))
        worst[f"model-{kind}"] = rep.max_rel
    model = build_model("lsnn-content", seed=11, groups=3, fc_width=512)
    y3 = rng.child("y3").integers(0, 10, (2, 3))
    rep = grad_check(model, x, y3, n_samples=100, rng=rng.child("seq"))
    worst["model-content-3groups"] = rep.max_rel

    elapsed = time.time() - t0
    peak = max(worst.values())
    detail = (f"max rel err {peak:.2e} over {len(worst)} layer/model checks "
              f"in {elapsed:.0f}s ({', '.join(f'{k}={v:.1e}' for k, v in worst.items())})")
    report(1, peak < 1e-5 and elapsed < 120, detail)


def test_c2_equivalence():
    t0 = time.time()
    ok, max_conv, max_rank1, residual = run_equivalence_checks(seed=7, instances=50)
    detail = (f"ones-vs-conv {max_conv:.2e}, rank1-vs-local {max_rank1:.2e} "
              f"(both < 1e-12 on 50 instances), rank-2 residual {residual:.3f} > 0, "
              f"in {time.time() - t0:.1f}s")
    report(2, ok and max_conv < 1e-12 and max_rank1 < 1e-12 and residual > 1e-6,
           detail)


def test_c3_normalization_invariants():
    rng = np.random.default_rng(33)
    grid = PatchGrid.make(6, 6)
    worst_sum = 0.0
    for _ in range(1000):
        params = GaussianParams(rng.uniform(-1, 2, 2), rng.uniform(-2, 2, 3))
        s = smoother_normalize(smoother_forward(params, grid))
        worst_sum = max(worst_sum, abs(s.values.sum() - 1.0))
    worst_grad = 0.0
    for _ in range(100):
        params = GaussianParams(rng.uniform(-1, 2, 2), rng.uniform(-2, 2, 3))
        raw = smoother_forward(params, grid)
        gmu, _ = normalized_backward(params, grid, raw, np.ones(grid.size))
        worst_grad = max(worst_grad, float(np.max(np.abs(gmu))))
    detail = (f"sum-to-one deviation {worst_sum:.2e} < 1e-12 on 1000 draws; "
              f"uniform-upstream mu gradient {worst_grad:.2e} < 1e-10")
    report(3, worst_sum < 1e-12 and worst_grad < 1e-10, detail)


def test_c4_mu_escape_amplification():
    rng = np.random.default_rng(44)
    grid = PatchGrid.make(6, 6)
    wins = 0
    for _ in range(100):
        params = GaussianParams([3.0, 3.0], rng.uniform(0.3, 1.5, 3))
        up = rng.normal(size=grid.size)
        raw = smoother_forward(params, grid)
        g_raw = np.concatenate(smoother_backward(params, grid, raw, up))
        g_norm = np.concatenate(normalized_backward(params, grid, raw, up))
        if np.linalg.norm(g_norm) > np.linalg.norm(g_raw):
            wins += 1
    report(4, wins == 100,
           f"normalized gradient norm exceeded the raw norm on {wins}/100 draws "
           f"with mu=(3,3) outside the window")


# ---------------------------------------------------------------------------
# Criteria 5-9: desk-scale experiments


@pytest.mark.experiment
def test_c5_cluttered_experiment(cluttered_results):
    e = _errors(cluttered_results)
    ordering = e["lsnn-location"] < e["cnn"] < e["local"]
    gap = e["local"] - e["lsnn-location"] >= 0.02
    content = e["lsnn-content"] <= e["lsnn-location"] + 0.005
    detail = (f"errors: location={e['lsnn-location']:.4f} cnn={e['cnn']:.4f} "
              f"local={e['local']:.4f} content={e['lsnn-content']:.4f}; "
              f"need location < cnn < local, local-location >= 2pts, "
              f"content <= location+0.5pt")
    report(5, ordering and gap and content, detail)


@pytest.mark.experiment
def test_c6_rect_experiment(rect_results):
    e = _errors(rect_results)
    ok = (e["lsnn-content"] < e["lsnn-location"] < e["cnn"] < e["local"])
    detail = (f"errors: content={e['lsnn-content']:.4f} "
              f"location={e['lsnn-location']:.4f} cnn={e['cnn']:.4f} "
              f"local={e['local']:.4f}; need content < location < cnn < local")
    report(6, ok, detail)


@pytest.mark.experiment
def test_c7_sequence_experiment(sequence_results):
    e = _errors(sequence_results)
    ok = (e["lsnn-content"] < e["lsnn-location"] < e["local"] < e["cnn"])
    detail = (f"errors: content={e['lsnn-content']:.4f} "
              f"location={e['lsnn-location']:.4f} local={e['local']:.4f} "
              f"cnn={e['cnn']:.4f}; need content < location < local < cnn")
    report(7, ok, detail)


@pytest.mark.experiment
def test_c8_viz_fidelity(cluttered_results, bench_pools):
    model, _ = load_checkpoint(cluttered_results["lsnn-content"]["checkpoint"])
    cfg = D.GeneratorConfig.default("cluttered", DATA_SEED + 1, 100)
    samples = D.gen_dataset(cfg, bench_pools["test"])
    xs = [s.pixels for s in samples]
    boxes = []
    for s in samples:
        r, c = (v / 2.0 for v in s.meta)  # canvas -> image coordinates
        boxes.append((r, c, r + 14, c + 14))
    frac = V.blend_argmax_hits(model, xs, boxes)
    report(8, frac >= 0.70,
           f"blended-heatmap argmax inside the digit box on {frac:.0%} "
           f"of 100 held-out samples (need >= 70%)")


@pytest.mark.experiment
def test_c9_determinism(cluttered_results, bench_pools, tmp_path_factory):
    rerun = _benchmark("cluttered", bench_pools, tmp_path_factory, "cluttered9")
    same_errors = all(rerun[k]["final_error"] == cluttered_results[k]["final_error"]
                      for k in rerun)
    same_hashes = all(rerun[k]["checkpoint_sha256"] ==
                      cluttered_results[k]["checkpoint_sha256"] for k in rerun)
    detail = ("rerun reproduced final error rates exactly and checkpoint "
              "sha256 digests matched for all four models")
    if not (same_errors and same_hashes):
        detail = (f"errors equal: {same_errors}, hashes equal: {same_hashes}; "
                  f"{_errors(rerun)} vs {_errors(cluttered_results)}")
    report(9, same_errors and same_hashes, detail)
