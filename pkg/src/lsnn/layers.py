"""Functional forward/backward primitives for all layer types.

Single-filter ops (conv, locally connected, smoothed) speak "patch
space": an image is unrolled into a matrix of flattened receptive
fields, one row per position, and every activation comes back as a flat
length-m vector in row-major grid order.  The batched multi-filter fast
paths used by the network classes live in `network`; they share the
im2col/col2im helpers below.

All gradients are hand-derived; there is no taping autodiff anywhere in
this package.
"""

from dataclasses import dataclass

import numpy as np

from .smoother import PatchGrid
from .tensor import ShapeError


# ---------------------------------------------------------------------------
# Patch extraction (unrolling)


@dataclass
class UnrolledInput:
    """Matrix of flattened receptive fields plus the position grid.

    patches[i] is the receptive field at row-major grid index i,
    flattened channel-major (all offsets of channel 0, then channel 1,
    and so on).  image_shape and kernel are kept so gradients can be
    scattered back onto the input.
    """

    patches: np.ndarray  # (m, K)
    grid: PatchGrid
    image_shape: tuple
    kernel: tuple


def _norm_kernel(k):
    if np.isscalar(k):
        return int(k), int(k)
    kh, kw = k
    return int(kh), int(kw)


def extract_patches(x, k, stride=1):
    """Unroll an image into its receptive fields (valid positions only).

    Accepts a 1-d signal (n,), a single-channel image (H, W), or a
    multi-channel image (C, H, W).  stride is fixed at 1.
    """
    if stride != 1:
        raise ValueError("only stride 1 is supported")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        k = int(k) if np.isscalar(k) else int(k[0])
        n = x.shape[0]
        if k > n:
            raise ShapeError(f"kernel {k} exceeds extent {n}")
        m = n - k + 1
        patches = np.lib.stride_tricks.sliding_window_view(x, k).copy()
        return UnrolledInput(patches, PatchGrid.make(1, m), x.shape, (k,))
    if x.ndim == 2:
        x3 = x[None]
    elif x.ndim == 3:
        x3 = x
    else:
        raise ShapeError(f"expected rank 1..3 input, got shape {x.shape}")
    kh, kw = _norm_kernel(k)
    c, h, w = x3.shape
    if kh > h or kw > w:
        raise ShapeError(f"kernel {(kh, kw)} exceeds extents {(h, w)}")
    patches = im2col(x3[None], kh, kw)[0]
    grid = PatchGrid.make(h - kh + 1, w - kw + 1)
    return UnrolledInput(patches, grid, x.shape, (kh, kw))


def scatter_patches(grad_patches, unrolled):
    """Adjoint of extract_patches: accumulate patch-row gradients back
    onto the input; overlapping positions add."""
    shape = unrolled.image_shape
    if len(shape) == 1:
        (k,) = unrolled.kernel
        grad = np.zeros(shape)
        for j in range(k):
            grad[j:j + grad_patches.shape[0]] += grad_patches[:, j]
        return grad
    kh, kw = unrolled.kernel
    x3 = shape if len(shape) == 3 else (1,) + shape
    grad = col2im(grad_patches[None], (1,) + x3, kh, kw)[0]
    return grad if len(shape) == 3 else grad[0]


def im2col(x, kh, kw):
    """(B, C, H, W) -> (B, m, C*kh*kw) patch matrix, row-major positions."""
    b, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (b, c, oh, ow, kh, kw), (sb, sc, sh, sw, sh, sw), writeable=False)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * kh * kw)


def col2im(grad_patches, x_shape, kh, kw):
    """Adjoint of im2col: scatter-add patch gradients to image layout."""
    b, c, h, w = x_shape
    oh, ow = h - kh + 1, w - kw + 1
    gp = grad_patches.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    grad = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            grad[:, :, i:i + oh, j:j + ow] += gp[:, :, i, j]
    return grad


# ---------------------------------------------------------------------------
# Locally smoothed layer (single filter, factor rank d)


def _as_factor(a):
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


@dataclass
class LsnnWeights:
    """Factorized per-position weights: smoother U (m, d), kernel V (K, d).

    The materialized weight matrix is W = U V^T, i.e. position p uses the
    kernel sum_l U[p, l] * V[:, l].  d = 1 recovers the plain
    smoother-times-kernel factorization.
    """

    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.U = _as_factor(self.U)
        self.V = _as_factor(self.V)
        if self.U.shape[1] != self.V.shape[1]:
            raise ShapeError(f"factor ranks disagree: U {self.U.shape}, V {self.V.shape}")

    @property
    def rank(self):
        return self.U.shape[1]

    def weight_matrix(self):
        return self.U @ self.V.T


def lsnn_forward(unrolled, weights):
    """Activation a_p = sum_l U[p, l] * (P_p . V[:, l]), flat (m,)."""
    if unrolled.patches.shape[0] != weights.U.shape[0]:
        raise ShapeError("smoother length does not match patch count")
    if unrolled.patches.shape[1] != weights.V.shape[0]:
        raise ShapeError("kernel length does not match patch size")
    conv = unrolled.patches @ weights.V  # (m, d)
    return np.einsum("md,md->m", conv, weights.U)


def lsnn_backward(unrolled, weights, upstream):
    """Gradients of sum_p upstream_p * a_p for the factorized layer."""
    upstream = np.asarray(upstream, dtype=np.float64)
    conv = unrolled.patches @ weights.V                 # (m, d)
    grad_u = upstream[:, None] * conv                   # (m, d)
    weighted = upstream[:, None] * weights.U            # (m, d)
    grad_v = unrolled.patches.T @ weighted              # (K, d)
    grad_input = scatter_patches(weighted @ weights.V.T, unrolled)
    return grad_u, grad_v, grad_input


# ---------------------------------------------------------------------------
# Convolution and locally connected layers (single filter)


def conv_forward(x, kernel):
    """Valid cross-correlation with a shared kernel, flat (m,) output."""
    kernel = np.asarray(kernel, dtype=np.float64)
    unrolled = extract_patches(x, _kernel_extents(x, kernel))
    return unrolled.patches @ kernel.reshape(-1)


def conv_backward(x, kernel, upstream):
    kernel = np.asarray(kernel, dtype=np.float64)
    unrolled = extract_patches(x, _kernel_extents(x, kernel))
    upstream = np.asarray(upstream, dtype=np.float64)
    grad_kernel = (unrolled.patches.T @ upstream).reshape(kernel.shape)
    grad_input = scatter_patches(np.outer(upstream, kernel.reshape(-1)), unrolled)
    return grad_kernel, grad_input


def _kernel_extents(x, kernel):
    x = np.asarray(x)
    if x.ndim == 1:
        return kernel.shape[0]
    return kernel.shape[-2], kernel.shape[-1]


def local_forward(x, weight_matrix, kernel=None):
    """Per-position kernels: a_p = P_p . W_p with W free, flat (m,).

    kernel gives the receptive-field extents; it may be omitted where the
    weight matrix determines them (1-d inputs, or square 2-d kernels).
    """
    w = np.asarray(weight_matrix, dtype=np.float64)
    unrolled = _unroll_for_local(x, w, kernel)
    return np.einsum("mk,mk->m", unrolled.patches, w)


def local_backward(x, weight_matrix, upstream, kernel=None):
    w = np.asarray(weight_matrix, dtype=np.float64)
    unrolled = _unroll_for_local(x, w, kernel)
    upstream = np.asarray(upstream, dtype=np.float64)
    grad_w = upstream[:, None] * unrolled.patches
    grad_input = scatter_patches(upstream[:, None] * w, unrolled)
    return grad_w, grad_input


def _unroll_for_local(x, w, kernel):
    x = np.asarray(x, dtype=np.float64)
    m, k = w.shape
    if kernel is None:
        if x.ndim == 1:
            kernel = x.shape[0] - m + 1
        else:
            c = x.shape[0] if x.ndim == 3 else 1
            kh = round((k / c) ** 0.5)
            if c * kh * kh != k:
                raise ShapeError("cannot infer a square kernel; pass kernel=")
            kernel = (kh, kh)
    unrolled = extract_patches(x, kernel)
    if unrolled.patches.shape != w.shape:
        raise ShapeError(f"weight matrix {w.shape} does not match patches "
                         f"{unrolled.patches.shape}")
    return unrolled


# ---------------------------------------------------------------------------
# Pooling, dense, activations, dropout


def maxpool_forward(x):
    """2x2 max pooling with stride 2 on (..., H, W); extents must be even.

    Returns (pooled, argmax) where argmax holds the within-window winner
    (0..3, row-major; ties go to the lowest index) for the backward pass.
    """
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"pooling needs even extents, got {(h, w)}")
    lead = x.shape[:-2]
    windows = x.reshape(*lead, h // 2, 2, w // 2, 2)
    order = tuple(range(len(lead))) + (len(lead), len(lead) + 2, len(lead) + 1, len(lead) + 3)
    windows = windows.transpose(order).reshape(*lead, h // 2, w // 2, 4)
    idx = np.argmax(windows, axis=-1)
    pooled = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def maxpool_backward(upstream, argmax_idx, input_shape):
    """Route gradient to each window's argmax element."""
    h, w = input_shape[-2], input_shape[-1]
    lead = input_shape[:-2]
    windows = np.zeros((*lead, h // 2, w // 2, 4))
    np.put_along_axis(windows, argmax_idx[..., None], upstream[..., None], axis=-1)
    windows = windows.reshape(*lead, h // 2, w // 2, 2, 2)
    order = tuple(range(len(lead))) + (len(lead), len(lead) + 2, len(lead) + 1, len(lead) + 3)
    return windows.transpose(order).reshape(input_shape)


def fc_forward(x, weight, bias):
    """Affine map: (B, n_in) @ (n_in, n_out) + bias."""
    return x @ weight + bias


def fc_backward(x, weight, upstream):
    grad_w = x.T @ upstream
    grad_b = upstream.sum(axis=0)
    grad_x = upstream @ weight.T
    return grad_w, grad_b, grad_x


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(upstream, mask):
    return upstream * mask


def dropout_forward(x, rate, rng, train):
    """Inverted dropout: scale kept units by 1/(1-rate) at train time,
    identity at eval time."""
    if not train or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    return x * keep / (1.0 - rate), keep


def dropout_backward(upstream, keep, rate):
    if keep is None:
        return upstream
    return upstream * keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# Losses


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    logits: (B, C) or (C,); labels: int class indices, shape (B,) or scalar.
    Uses the log-sum-exp shift for stability.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(b), labels]))
    grad = np.exp(shifted)
    grad /= grad.sum(axis=1, keepdims=True)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad


def sigmoid_bce(logits, targets):
    """Mean (over rows) summed binary cross-entropy on sigmoid logits.

    Stable form: bce(z, t) = max(z, 0) - z*t + log(1 + exp(-|z|)).
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    if np.any((targets != 0.0) & (targets != 1.0)):
        raise ValueError("targets must be binary")
    b = logits.shape[0]
    per = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    loss = float(per.sum() / b)
    sig = 1.0 / (1.0 + np.exp(-logits))
    grad = (sig - targets) / b
    return loss, grad
