"""Tissue detection on slide thumbnails and tile enumeration.

One thumbnail pixel stands for one ``scale x scale`` tile of the source
image, so the tissue mask doubles as the tile grid.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from PIL import Image
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class InvalidInputError(ValueError):
    pass


class DegenerateHistogramError(InvalidInputError):
    pass


@dataclass(frozen=True, order=True)
class TileRef:
    slide_id: str
    row: int
    col: int
    x: int
    y: int
    size: int


def load_raster(path):
    """Read an image as ``uint8`` ``(H, W)`` or ``(H, W, 3)``."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("L" if im.mode in ("1", "I", "I;16", "F") else "RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def save_raster(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


def to_gray(img):
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img.astype(np.float64) @ LUMA
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0].astype(np.float64)
    raise InvalidInputError(f"unsupported raster shape {img.shape}")


def make_thumbnail(img, scale=224):
    """Block-mean grayscale thumbnail; partial edge blocks average what exists."""
    if scale < 1:
        raise InvalidInputError("scale must be >= 1")
    img = np.asarray(img)
    if img.size == 0:
        raise InvalidInputError("empty image")
    gray = to_gray(img)
    h, w = gray.shape
    th, tw = -(-h // scale), -(-w // scale)
    padded = np.zeros((th * scale, tw * scale))
    padded[:h, :w] = gray
    sums = padded.reshape(th, scale, tw, scale).sum(axis=(1, 3))
    rows = np.minimum(scale, h - np.arange(th) * scale)
    cols = np.minimum(scale, w - np.arange(tw) * scale)
    means = sums / np.outer(rows, cols)
    return np.clip(np.rint(means), 0, 255).astype(np.uint8)


def otsu_threshold(gray):
    """Otsu level ``t``: classes are ``< t`` and ``>= t``; smallest maximizer wins.

    Between-class variance is compared exactly (rational arithmetic) so that
    ties are real ties.
    """
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise InvalidInputError("otsu_threshold expects a single-channel image")
    hist = np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256).tolist()
    if sum(1 for c in hist if c) < 2:
        raise DegenerateHistogramError("image has fewer than two distinct intensities")
    n = sum(hist)
    total = sum(i * c for i, c in enumerate(hist))
    best_t, best = 0, Fraction(-1)
    n0 = s0 = 0
    for t in range(256):
        # class 0 = intensities < t
        if 0 < n0 < n:
            score = Fraction((s0 * n - total * n0) ** 2, n0 * (n - n0))
            if score > best:
                best_t, best = t, score
        n0 += hist[t]
        s0 += t * hist[t]
    return best_t


def binarize_tissue(gray, t):
    """Tissue is the darker side: positive iff intensity < t."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise InvalidInputError("binarize_tissue expects a single-channel image")
    return gray < t


def filter_small_components(mask, min_size=10):
    if min_size < 0:
        raise InvalidInputError("min_size must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if min_size == 0 or not mask.any():
        return mask.copy()
    labels, _ = ndimage.label(mask, structure=EIGHT_CONNECTED)
    counts = np.bincount(labels.ravel())
    keep = counts >= min_size
    keep[0] = False
    return keep[labels]


def erode_mask(mask):
    """3x3 erosion; pixels outside the image count as background."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    padded = np.pad(mask, 1, constant_values=False)
    out = np.ones_like(mask)
    for dy in range(3):
        for dx in range(3):
            out &= padded[dy:dy + h, dx:dx + w]
    return out


def reduce_annotation(annot, shape, scale=224):
    """Bring an annotation raster onto the thumbnail grid.

    Masks already at thumbnail geometry pass through; source-resolution masks
    mark a thumbnail pixel when at least half of its block is annotated.
    """
    annot = np.asarray(annot)
    if annot.ndim == 3:
        annot = annot.max(axis=2)
    annot = annot > 0
    if annot.shape == tuple(shape):
        return annot
    frac = make_thumbnail(annot.astype(np.uint8) * 255, scale)
    if frac.shape != tuple(shape):
        raise InvalidInputError(f"annotation geometry {annot.shape} does not match mask {tuple(shape)}")
    return frac >= 128


def enumerate_tiles(mask, annot=None, slide_id="", scale=224, size=None, source_shape=None):
    """One :class:`TileRef` per positive (and annotated) thumbnail pixel, row-major."""
    mask = np.asarray(mask, dtype=bool)
    size = scale if size is None else size
    if annot is not None:
        annot = np.asarray(annot, dtype=bool)
        if annot.shape != mask.shape:
            raise InvalidInputError(f"annotation shape {annot.shape} != mask shape {mask.shape}")
        mask = mask & annot
    tiles = []
    for r, c in zip(*np.nonzero(mask)):
        x, y = int(c) * scale, int(r) * scale
        if source_shape is not None and (y + size > source_shape[0] or x + size > source_shape[1]):
            continue
        tiles.append(TileRef(slide_id, int(r), int(c), x, y, size))
    return tiles


def extract_tile(img, tile):
    img = np.asarray(img)
    h, w = img.shape[:2]
    if tile.x < 0 or tile.y < 0 or tile.x + tile.size > w or tile.y + tile.size > h:
        raise InvalidInputError(f"tile {tile} outside {w}x{h} image")
    return img[tile.y:tile.y + tile.size, tile.x:tile.x + tile.size].copy()


def tissue_mask(img, scale=224, min_size=10):
    """Thumbnail -> Otsu -> small-blob removal.  Returns ``(thumb, mask)`` (pre-erosion)."""
    thumb = make_thumbnail(img, scale)
    t = otsu_threshold(thumb)
    mask = filter_small_components(binarize_tissue(thumb, t), min_size)
    return thumb, mask


def tile_slide(img, slide_id, annot=None, scale=224, min_size=10):
    _, mask = tissue_mask(img, scale, min_size)
    eroded = erode_mask(mask)
    if annot is not None:
        annot = reduce_annotation(annot, mask.shape, scale)
    return enumerate_tiles(eroded, annot, slide_id, scale, scale, np.asarray(img).shape[:2])


TILE_FIELDS = ["slide_id", "row", "col", "x", "y", "size"]


def write_tile_index(path, tiles):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TILE_FIELDS)
        for t in sorted(tiles):
            w.writerow([t.slide_id, t.row, t.col, t.x, t.y, t.size])


def read_tile_index(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            TileRef(r["slide_id"], int(r["row"]), int(r["col"]), int(r["x"]), int(r["y"]), int(r["size"]))
            for r in csv.DictReader(fh, delimiter="\t")
        ]
