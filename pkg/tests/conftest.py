import numpy as np
import pytest

from lsnn import data as D


@pytest.fixture(scope="session")
def digit_pool():
    """Small rendered digit pool shared by data/CLI tests."""
    return D.synth_digit_pool(400, 600)


@pytest.fixture(scope="session")
def digit_pools(digit_pool):
    test_imgs, test_labs = D.synth_digit_pool(401, 300)
    return {"train": digit_pool, "test": (test_imgs, test_labs)}


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory, digit_pools):
    """IDX files under the standard MNIST names."""
    d = tmp_path_factory.mktemp("digits")
    tr_img, tr_lab = digit_pools["train"]
    te_img, te_lab = digit_pools["test"]
    D.write_idx_images(d / D.MNIST_FILES["train_images"], tr_img)
    D.write_idx_labels(d / D.MNIST_FILES["train_labels"], tr_lab)
    D.write_idx_images(d / D.MNIST_FILES["test_images"], te_img)
    D.write_idx_labels(d / D.MNIST_FILES["test_labels"], te_lab)
    return d


def rel_err(a, n, floor=1e-3):
    """|a-n| / max(|a|+|n|, floor); the floor keeps finite-difference noise
    on near-zero gradients from registering as relative error."""
    return abs(a - n) / max(abs(a) + abs(n), floor)


def central_diff(f, x, i, h=1e-6):
    """Central finite difference of scalar f at x.flat[i]."""
    x = np.asarray(x, dtype=np.float64)
    x1 = x.copy()
    x1.flat[i] += h
    x2 = x.copy()
    x2.flat[i] -= h
    return (f(x1) - f(x2)) / (2.0 * h)
