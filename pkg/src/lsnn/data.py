"""Digit ingestion (IDX), synthetic benchmark generators, and dataset files.

Three benchmark tasks are generated from a pool of 28x28 digit images:

  cluttered   one digit placed uniformly at random on an 84x84 black
              canvas, 32 random 6x6 crops from other digit images added
              as distractors, then 2x2 mean-pooled down to 42x42.
              Label: the digit.
  arrow       two digits in two distinct corners of an 84x84 canvas and
              a centered arrow glyph pointing at the target corner.
  rect        two digits placed at random, a 1-pixel 32x32 rectangle
              outline centered on the target digit.
  sequence    three digits on a 100x100 canvas, each subsequent digit one
              fixed step to the right at a random slope within +-45
              degrees, 8 clutter crops, bilinear-resized to 42x42.
              Labels: the three digits, left to right.

All compositing is elementwise max, so pixels stay in [0, 1].  Every
sample is produced from its own child random stream keyed by (seed,
sample index), which makes generation order-independent and byte-stable
for a fixed seed.

Dataset files ("LSDS"): magic, task tag, the generator configuration as
a key=value text block, the sample count, then per sample three LSTN
tensors (pixels, labels, placement metadata), everything little-endian.
"""

import glob
import gzip
import importlib.util
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng, read_tensor, write_tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
DATASET_MAGIC = b"LSDS"

TASKS = ("cluttered", "arrow", "rect", "sequence")

# per-task placement metadata layout (row/col are canvas-scale top-left corners)
META_FIELDS = {
    "cluttered": ("digit_row", "digit_col"),
    "arrow": ("target_row", "target_col", "other_row", "other_col", "arrow_dir"),
    "rect": ("target_row", "target_col", "other_row", "other_col",
             "rect_row", "rect_col"),
    "sequence": ("row1", "col1", "row2", "col2", "row3", "col3"),
}


# ---------------------------------------------------------------------------
# IDX files


def _open_maybe_gz(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path):
    """Read an IDX file; images come back as (N, R, C) float64 in [0, 1],
    labels as an int64 vector."""
    with _open_maybe_gz(path) as fh:
        head = fh.read(4)
        if len(head) != 4:
            raise ValueError(f"{path}: truncated header at byte 0")
        (magic,) = struct.unpack(">I", head)
        if magic == IDX_IMAGE_MAGIC:
            dims = 3
        elif magic == IDX_LABEL_MAGIC:
            dims = 1
        else:
            raise ValueError(f"{path}: bad IDX magic 0x{magic:08x} at byte 0")
        shape = []
        for d in range(dims):
            raw = fh.read(4)
            if len(raw) != 4:
                raise ValueError(f"{path}: truncated dimension at byte {4 + 4 * d}")
            shape.append(struct.unpack(">I", raw)[0])
        count = int(np.prod(shape))
        payload = fh.read(count)
        if len(payload) != count:
            raise ValueError(f"{path}: truncated payload at byte "
                             f"{4 + 4 * dims + len(payload)}")
        data = np.frombuffer(payload, dtype=np.uint8).reshape(shape)
        if magic == IDX_IMAGE_MAGIC:
            return data.astype(np.float64) / 255.0
        return data.astype(np.int64)


def write_idx_images(path, images):
    """images: (N, R, C) uint8."""
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def load_digit_pools(directory):
    """Load train/test digit pools from IDX files in `directory`.

    Accepts the standard MNIST file names, optionally gzipped.  Returns
    {"train": (images, labels), "test": (images, labels)}.
    """
    pools = {}
    for split in ("train", "test"):
        pair = []
        for part in ("images", "labels"):
            base = os.path.join(directory, MNIST_FILES[f"{split}_{part}"])
            path = base if os.path.exists(base) else base + ".gz"
            if not os.path.exists(path):
                raise FileNotFoundError(
                    f"missing digit file {base}[.gz] -- provide MNIST IDX files in "
                    f"{directory} or generate a synthetic pool with "
                    f"`lsnn gen --synth-pool`")
            pair.append(read_idx(path))
        pools[split] = tuple(pair)
    return pools


# ---------------------------------------------------------------------------
# Synthetic digit pool (font-rendered stand-in corpus in MNIST layout)


_FONT_NAMES = ("DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSerif.ttf",
               "DejaVuSerif-Bold.ttf", "DejaVuSansMono.ttf", "DejaVuSansMono-Bold.ttf")


def _find_fonts():
    roots = []
    spec = importlib.util.find_spec("matplotlib")
    if spec is not None and spec.origin:
        roots.append(os.path.join(os.path.dirname(spec.origin),
                                  "mpl-data", "fonts", "ttf"))
    roots += ["/usr/share/fonts", "/usr/local/share/fonts"]
    found = []
    for root in roots:
        for name in _FONT_NAMES:
            found += glob.glob(os.path.join(root, name))
            found += glob.glob(os.path.join(root, "**", name), recursive=True)
    seen, out = set(), []
    for f in found:
        base = os.path.basename(f)
        if base not in seen:
            seen.add(base)
            out.append(f)
    if not out:
        raise RuntimeError("no TTF fonts found for the synthetic digit pool")
    return out


def synth_digit_pool(seed, count):
    """Render `count` 28x28 digit images with per-sample random font, size,
    rotation, and offset.  Classes cycle 0..9 so the pool is exactly
    balanced.  Returns (images uint8 (count, 28, 28), labels int64)."""
    from PIL import Image, ImageDraw, ImageFont

    font_paths = _find_fonts()
    fonts = {}
    images = np.zeros((count, 28, 28), dtype=np.uint8)
    labels = np.arange(count, dtype=np.int64) % 10
    big = 56  # render at 2x, then mean-pool for anti-aliasing
    for i in range(count):
        stream = Rng(seed).child("digit", i)
        digit = int(labels[i])
        fi = int(stream.integers(len(font_paths)))
        size = int(stream.integers(30, 45))
        key = (fi, size)
        if key not in fonts:
            fonts[key] = ImageFont.truetype(font_paths[fi], size)
        font = fonts[key]
        img = Image.new("L", (big, big), 0)
        draw = ImageDraw.Draw(img)
        left, top, right, bottom = draw.textbbox((0, 0), str(digit), font=font)
        cx = (big - (right - left)) / 2 - left
        cy = (big - (bottom - top)) / 2 - top
        jx, jy = stream.integers(-3, 4, 2)
        draw.text((cx + jx, cy + jy), str(digit), fill=255, font=font)
        angle = float(stream.uniform(-12.0, 12.0))
        img = img.rotate(angle, resample=Image.BILINEAR, fillcolor=0)
        arr = np.asarray(img, dtype=np.float64)
        small = arr.reshape(28, 2, 28, 2).mean(axis=(1, 3))
        peak = small.max()
        if peak > 0:
            small = small * (255.0 / peak)
        images[i] = np.round(small).astype(np.uint8)
    return images, labels


def write_synth_pool(directory, seed=90, n_train=15000, n_test=3000):
    """Write a synthetic digit pool to `directory` under the MNIST names."""
    os.makedirs(directory, exist_ok=True)
    tr_img, tr_lab = synth_digit_pool(seed, n_train)
    te_img, te_lab = synth_digit_pool(seed + 1, n_test)
    write_idx_images(os.path.join(directory, MNIST_FILES["train_images"]), tr_img)
    write_idx_labels(os.path.join(directory, MNIST_FILES["train_labels"]), tr_lab)
    write_idx_images(os.path.join(directory, MNIST_FILES["test_images"]), te_img)
    write_idx_labels(os.path.join(directory, MNIST_FILES["test_labels"]), te_lab)


# ---------------------------------------------------------------------------
# Generators


@dataclass
class GeneratorConfig:
    task: str
    seed: int
    count: int
    canvas: int = 84
    out_size: int = 42
    digit_size: int = 28
    clutter_count: int = 32
    clutter_size: int = 6
    step: int = 34          # sequence: center-to-center digit spacing
    rect_size: int = 32
    max_retries: int = 1000

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")

    @classmethod
    def default(cls, task, seed, count):
        if task == "sequence":
            return cls(task, seed, count, canvas=100, clutter_count=8)
        if task in ("arrow", "rect"):
            return cls(task, seed, count, clutter_count=0)
        return cls(task, seed, count)

    def as_dict(self):
        return {k: getattr(self, k) for k in (
            "task", "seed", "count", "canvas", "out_size", "digit_size",
            "clutter_count", "clutter_size", "step", "rect_size")}


@dataclass
class LabeledImage:
    pixels: np.ndarray          # (out, out) float64 in [0, 1]
    labels: np.ndarray          # int64, length 1 or 3
    meta: np.ndarray = field(default_factory=lambda: np.zeros(0))


# Arrow glyph: 15x15 stencil pointing to the top-left corner; the other
# three orientations are right-angle rotations.  The stencil is part of
# the dataset format, not a tunable.
def _arrow_base():
    s = np.zeros((15, 15))
    for i in range(15):
        s[i, i] = 1.0
        if i + 1 < 15:
            s[i + 1, i] = 1.0
    s[0, :7] = 1.0
    s[:7, 0] = 1.0
    return s


# index by corner: 0=TL, 1=TR, 2=BL, 3=BR (rot90 turns TL->BL->BR->TR)
ARROW_STENCILS = {0: _arrow_base(),
                  1: np.rot90(_arrow_base(), 3),
                  2: np.rot90(_arrow_base(), 1),
                  3: np.rot90(_arrow_base(), 2)}


class _Pool:
    """Digit pool with per-class index for class-balanced target sampling."""

    def __init__(self, images, labels):
        self.images = np.asarray(images, dtype=np.float64)
        if self.images.max() > 1.0:
            self.images = self.images / 255.0
        self.labels = np.asarray(labels, dtype=np.int64)
        self.by_class = [np.flatnonzero(self.labels == c) for c in range(10)]
        for c, idx in enumerate(self.by_class):
            if len(idx) == 0:
                raise ValueError(f"digit pool has no examples of class {c}")

    def uniform_class_digit(self, stream):
        c = int(stream.integers(10))
        idx = self.by_class[c][int(stream.integers(len(self.by_class[c])))]
        return self.images[idx], c

    def any_digit(self, stream):
        idx = int(stream.integers(len(self.images)))
        return self.images[idx], int(self.labels[idx])


def _paste_max(canvas, tile, r, c):
    h, w = tile.shape
    region = canvas[r:r + h, c:c + w]
    np.maximum(region, tile, out=region)


def _add_clutter(canvas, pool, stream, count, size):
    lim = canvas.shape[0] - size
    src_lim = pool.images.shape[1] - size
    for _ in range(count):
        img, _ = pool.any_digit(stream)
        sr, sc = stream.integers(0, src_lim + 1, 2)
        crop = img[sr:sr + size, sc:sc + size]
        dr, dc = stream.integers(0, lim + 1, 2)
        _paste_max(canvas, crop, int(dr), int(dc))


def _meanpool2(img):
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def resize_bilinear(img, out_size):
    """Corner-aligned separable bilinear resize, double precision."""
    s = img.shape[0]
    w = _bilinear_matrix(s, out_size)
    return w @ img @ w.T


def _bilinear_matrix(src, dst):
    w = np.zeros((dst, src))
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    hi = np.minimum(lo + 1, src - 1)
    w[np.arange(dst), lo] += 1.0 - frac
    w[np.arange(dst), hi] += frac
    return w


def gen_dataset(cfg, pool):
    """Generate cfg.count samples of cfg.task from a digit pool.

    pool: (images, labels) arrays; images may be uint8 or [0, 1] floats.
    """
    pool = _Pool(*pool)
    maker = {"cluttered": _sample_cluttered, "arrow": _sample_arrow,
             "rect": _sample_rect, "sequence": _sample_sequence}[cfg.task]
    base = Rng(cfg.seed)
    return [maker(cfg, pool, base.child("sample", i)) for i in range(cfg.count)]


def _sample_cluttered(cfg, pool, stream):
    canvas = np.zeros((cfg.canvas, cfg.canvas))
    digit, cls = pool.uniform_class_digit(stream)
    lim = cfg.canvas - cfg.digit_size
    r, c = (int(v) for v in stream.integers(0, lim + 1, 2))
    _paste_max(canvas, digit, r, c)
    _add_clutter(canvas, pool, stream, cfg.clutter_count, cfg.clutter_size)
    return LabeledImage(_meanpool2(canvas), np.array([cls], dtype=np.int64),
                        np.array([r, c], dtype=np.float64))


_CORNER_OFFSETS = ((0, 0), (0, 56), (56, 0), (56, 56))


def _sample_arrow(cfg, pool, stream):
    canvas = np.zeros((cfg.canvas, cfg.canvas))
    target_corner = int(stream.integers(4))
    other_corner = int(stream.integers(3))
    if other_corner >= target_corner:
        other_corner += 1
    digit, cls = pool.uniform_class_digit(stream)
    other, _ = pool.any_digit(stream)
    tr, tc = _CORNER_OFFSETS[target_corner]
    orr, oc = _CORNER_OFFSETS[other_corner]
    _paste_max(canvas, digit, tr, tc)
    _paste_max(canvas, other, orr, oc)
    stencil = ARROW_STENCILS[target_corner]
    start = (cfg.canvas - stencil.shape[0]) // 2
    _paste_max(canvas, stencil, start, start)
    meta = np.array([tr, tc, orr, oc, target_corner], dtype=np.float64)
    return LabeledImage(_meanpool2(canvas), np.array([cls], dtype=np.int64), meta)


def _sample_rect(cfg, pool, stream):
    canvas = np.zeros((cfg.canvas, cfg.canvas))
    digit, cls = pool.uniform_class_digit(stream)
    other, _ = pool.any_digit(stream)
    half = cfg.rect_size // 2
    pad = half - cfg.digit_size // 2  # rectangle margin around the digit box
    for attempt in range(cfg.max_retries):
        tr, tc = (int(v) for v in
                  stream.integers(pad, cfg.canvas - cfg.digit_size - pad + 1, 2))
        orr, oc = (int(v) for v in
                   stream.integers(0, cfg.canvas - cfg.digit_size + 1, 2))
        boxes_apart = (abs(tr - orr) >= cfg.digit_size or
                       abs(tc - oc) >= cfg.digit_size)
        ocr, occ = orr + cfg.digit_size // 2, oc + cfg.digit_size // 2
        rr, rc = tr - pad, tc - pad
        center_outside = not (rr <= ocr < rr + cfg.rect_size and
                              rc <= occ < rc + cfg.rect_size)
        if boxes_apart and center_outside:
            break
    else:
        raise RuntimeError("rect placement retries exhausted")
    _paste_max(canvas, digit, tr, tc)
    _paste_max(canvas, other, orr, oc)
    canvas[rr, rc:rc + cfg.rect_size] = 1.0
    canvas[rr + cfg.rect_size - 1, rc:rc + cfg.rect_size] = 1.0
    canvas[rr:rr + cfg.rect_size, rc] = 1.0
    canvas[rr:rr + cfg.rect_size, rc + cfg.rect_size - 1] = 1.0
    meta = np.array([tr, tc, orr, oc, rr, rc], dtype=np.float64)
    return LabeledImage(_meanpool2(canvas), np.array([cls], dtype=np.int64), meta)


def _sample_sequence(cfg, pool, stream):
    lim = cfg.canvas - cfg.digit_size
    for attempt in range(cfg.max_retries):
        r1, c1 = (int(v) for v in stream.integers(0, lim + 1, 2))
        angles = stream.uniform(-np.pi / 4, np.pi / 4, 2)
        pts = [(r1, c1)]
        ok = True
        for th in angles:
            r = pts[-1][0] + cfg.step * np.sin(th)
            c = pts[-1][1] + cfg.step * np.cos(th)
            ri, ci = int(round(r)), int(round(c))
            if not (0 <= ri <= lim and 0 <= ci <= lim):
                ok = False
                break
            pts.append((ri, ci))
        if ok:
            break
    else:
        raise RuntimeError("sequence placement retries exhausted")
    canvas = np.zeros((cfg.canvas, cfg.canvas))
    labels = []
    for r, c in pts:
        digit, cls = pool.uniform_class_digit(stream)
        _paste_max(canvas, digit, r, c)
        labels.append(cls)
    _add_clutter(canvas, pool, stream, cfg.clutter_count, cfg.clutter_size)
    out = resize_bilinear(canvas, cfg.out_size)
    meta = np.array([v for p in pts for v in p], dtype=np.float64)
    return LabeledImage(out, np.array(labels, dtype=np.int64), meta)


# ---------------------------------------------------------------------------
# Dataset files


def save_dataset(path, cfg, samples):
    cfg_text = "".join(f"{k}={v}\n" for k, v in sorted(cfg.as_dict().items()))
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        tag = cfg.task.encode("ascii")
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        blob = cfg_text.encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            write_tensor(fh, s.pixels)
            write_tensor(fh, s.labels.astype(np.float64))
            write_tensor(fh, s.meta)


def load_dataset(path):
    """Returns (task, header dict, samples)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError(f"{path}: bad dataset magic {magic!r}")
        (tlen,) = struct.unpack("<I", fh.read(4))
        task = fh.read(tlen).decode("ascii")
        (clen,) = struct.unpack("<I", fh.read(4))
        header = {}
        for line in fh.read(clen).decode("utf-8").splitlines():
            k, v = line.split("=", 1)
            header[k] = v
        (n,) = struct.unpack("<I", fh.read(4))
        samples = []
        for _ in range(n):
            pixels = read_tensor(fh)
            labels = read_tensor(fh).astype(np.int64)
            meta = read_tensor(fh)
            samples.append(LabeledImage(pixels, labels, meta))
    return task, header, samples


def dataset_arrays(samples):
    """Stack samples into model inputs: X (N, 1, H, W), y (N,) or (N, 3),
    meta (N, k)."""
    x = np.stack([s.pixels for s in samples])[:, None]
    labels = np.stack([s.labels for s in samples])
    y = labels[:, 0] if labels.shape[1] == 1 else labels
    meta = np.stack([s.meta for s in samples])
    return x, y, meta
