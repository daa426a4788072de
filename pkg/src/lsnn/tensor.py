"""Dense tensor ops, deterministic RNG, and the LSTN serialization format.

Everything in this package works on plain float64 numpy arrays in C
(row-major) order.  The helpers here add the contracts the rest of the
code relies on: shape checking, finiteness checking (no NaN/Inf leaves
an operation silently), clamped exp, and tie-breaking rules for argmax.

Serialized tensor layout (magic "LSTN"):

    bytes 0..3   b"LSTN"
    byte  4      rank as u8
    then         rank extents, little-endian u32 each
    then         payload, little-endian f64, row-major

The payload is bit-comparable across platforms because the layout and
precision are fixed.
"""

import struct
import zlib

import numpy as np

MAGIC = b"LSTN"

EXP_CLAMP = 700.0  # |x| above this would overflow exp in float64


class ShapeError(ValueError):
    pass


def as_tensor(x):
    """Coerce to a float64 C-order array without copying when possible."""
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(t, what="tensor"):
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t


def matmul(a, b):
    """Matrix product with explicit inner-dimension check."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def _binary(op, a, b):
    a = as_tensor(a)
    if np.isscalar(b) or getattr(b, "ndim", None) == 0:
        return check_finite(op(a, float(b)))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise operands disagree: {a.shape} vs {b.shape}")
    return check_finite(op(a, b))


def add(a, b):
    return _binary(np.add, a, b)


def sub(a, b):
    return _binary(np.subtract, a, b)


def mul(a, b):
    return _binary(np.multiply, a, b)


def scale(a, s):
    return check_finite(as_tensor(a) * float(s))


def exp(a):
    """Elementwise exp with the input clamped to [-700, 700].

    Exponents produced by the Gaussian smoother are <= 0 analytically, so
    the clamp never changes a well-formed computation; it only guards
    against overflow from corrupted inputs.
    """
    return np.exp(np.clip(as_tensor(a), -EXP_CLAMP, EXP_CLAMP))


def _check_axis(t, axis):
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    if t.shape[axis] == 0:
        raise ValueError("reduction over an empty axis")


def reduce_sum(t, axis=None):
    t = as_tensor(t)
    if axis is None:
        if t.size == 0:
            raise ValueError("reduction over an empty tensor")
        return float(np.sum(t))
    _check_axis(t, axis)
    return check_finite(np.sum(t, axis=axis))


def reduce_max(t, axis=None):
    t = as_tensor(t)
    if axis is None:
        if t.size == 0:
            raise ValueError("reduction over an empty tensor")
        return float(np.max(t))
    _check_axis(t, axis)
    return np.max(t, axis=axis)


def argmax(t, axis=None):
    """Index of the maximum; ties resolve to the lowest index."""
    t = as_tensor(t)
    if axis is None:
        if t.size == 0:
            raise ValueError("argmax of an empty tensor")
        return int(np.argmax(t))
    _check_axis(t, axis)
    return np.argmax(t, axis=axis)


# ---------------------------------------------------------------------------
# Serialization


def write_tensor(fh, t):
    t = as_tensor(t)
    if t.ndim > 255:
        raise ShapeError("rank exceeds u8")
    fh.write(MAGIC)
    fh.write(struct.pack("<B", t.ndim))
    for extent in t.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(t.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(fh):
    start = fh.tell()
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r} at byte {start}")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1, start))
    shape = []
    for _ in range(rank):
        (extent,) = struct.unpack("<I", _read_exact(fh, 4, start))
        shape.append(extent)
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(fh, count * 8, start)
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def _read_exact(fh, n, start):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated tensor record starting at byte {start}")
    return data


def save_tensor(path, t):
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)


# ---------------------------------------------------------------------------
# Deterministic splittable RNG


class Rng:
    """Deterministic random stream with cheap, collision-free children.

    Built on PCG64 seeded through numpy's SeedSequence, so a given
    (seed, key path) pair produces the same stream on every platform.
    Children are derived with spawn keys, which makes per-sample or
    per-epoch streams independent of the order they are created in.
    """

    def __init__(self, seed, _key=()):
        self.seed = int(seed)
        self.key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key):
        return Rng(self.seed, self.key + tuple(_key_part(k) for k in key))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)


def _key_part(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)
