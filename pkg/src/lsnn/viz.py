"""Smoother heatmap export as binary PGM images.

The smoother lives on the first layer's patch grid; heatmaps upsample it
to image resolution with nearest-neighbor so the files show the actual
per-patch weights, not an interpolation of them.
"""

import numpy as np


def write_pgm(path, img):
    """Write a [0, 1] grayscale array as binary PGM (P5, maxval 255)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


def upsample_nearest(grid, out_hw):
    """(R, C) grid -> (H, W) image by nearest-neighbor index mapping."""
    r, c = grid.shape
    h, w = out_hw
    ri = np.minimum((np.arange(h) * r) // h, r - 1)
    ci = np.minimum((np.arange(w) * c) // w, c - 1)
    return grid[np.ix_(ri, ci)]


def smoother_heatmaps(model, pixels):
    """Per-smoother and blended heatmaps for one input image.

    Returns (maps, blends): maps has shape (groups, filters, H, W) with
    each smoother upsampled to image resolution; blends (groups, H, W) is
    the pixelwise max across a group's smoothers, max-normalized per image.
    """
    first = model.first
    if not hasattr(first, "smoother_values"):
        raise TypeError("model's first layer has no smoothers")
    x = np.asarray(pixels, dtype=np.float64)
    hw = x.shape
    first.begin(x[None, :, :, None], train=False)  # layers run channels-last
    rows, cols = first.out_hw
    maps, blends = [], []
    for g in range(first.groups):
        first.group_forward(g)
        values = first.smoother_values(g)
        if values.ndim == 3:  # content mode: (B=1, F, m)
            values = values[0]
        up = np.stack([upsample_nearest(v.reshape(rows, cols), hw) for v in values])
        blend = up.max(axis=0)
        peak = blend.max()
        if peak > 0:
            blend = blend / peak
        maps.append(up)
        blends.append(blend)
    return np.stack(maps), np.stack(blends)


def overlay(pixels, blend):
    """Tint the input by the blended heatmap: 0.5*image + 0.5*blend."""
    return 0.5 * np.asarray(pixels, dtype=np.float64) + 0.5 * blend


def export_viz(model, pixels, out_dir, prefix):
    """Write per-smoother, blended, and overlay PGMs; returns the paths."""
    import os

    maps, blends = smoother_heatmaps(model, pixels)
    groups, filters = maps.shape[:2]
    paths = []
    for g in range(groups):
        tag = f"{prefix}_g{g}" if groups > 1 else prefix
        for f in range(filters):
            m = maps[g, f]
            peak = m.max()
            p = os.path.join(out_dir, f"{tag}_smoother{f:02d}.pgm")
            write_pgm(p, m / peak if peak > 0 else m)
            paths.append(p)
        p = os.path.join(out_dir, f"{tag}_blend.pgm")
        write_pgm(p, blends[g])
        paths.append(p)
        p = os.path.join(out_dir, f"{tag}_overlay.pgm")
        write_pgm(p, overlay(pixels, blends[g]))
        paths.append(p)
    return paths


def blend_argmax_hits(model, xs, boxes):
    """Fraction of samples whose blended-heatmap argmax falls inside the
    given (row0, col0, row1, col1) half-open pixel boxes."""
    hits = 0
    for pixels, (r0, c0, r1, c1) in zip(xs, boxes):
        _, blends = smoother_heatmaps(model, pixels)
        flat = int(np.argmax(blends[0]))
        r, c = divmod(flat, blends.shape[-1])
        if r0 <= r < r1 and c0 <= c < c1:
            hits += 1
    return hits / len(boxes)
