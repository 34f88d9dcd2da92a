"""Blur quality control: synthetic-blur regression and tile filtering."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import nn
from .tiling import InvalidInputError, TileRef


class TrainingError(RuntimeError):
    pass


def gaussian_kernel(radius):
    """1-D kernel for a blur "radius": sigma = radius / 2, half-width ceil(3 sigma)."""
    sigma = radius / 2.0
    half = int(math.ceil(3.0 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, radius):
    """Separable Gaussian blur with edge clamping.  Keeps the input dtype."""
    if radius < 0:
        raise InvalidInputError("blur radius must be >= 0")
    img = np.asarray(img)
    if radius == 0:
        return img.copy()
    k = gaussian_kernel(radius)
    out = img.astype(np.float64)
    for axis in (0, 1):
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(img.dtype)
    return out.astype(img.dtype)


@dataclass
class BlurSample:
    tile: np.ndarray
    target_radius: float


@dataclass(frozen=True)
class QcVerdict:
    tile_ref: TileRef
    score: float
    keep: bool


def make_blur_dataset(tiles, seed, min_radius=1.0, max_radius=10.0):
    """Blur floor(n/2) randomly chosen tiles with radius ~ U[min, max]; the rest stay sharp."""
    tiles = list(tiles)
    if len(tiles) < 2:
        raise InvalidInputError("need at least two tiles")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(tiles))
    blurred = set(order[: len(tiles) // 2].tolist())
    radii = rng.uniform(min_radius, max_radius, size=len(tiles))
    out = []
    for i, tile in enumerate(tiles):
        if i in blurred:
            out.append(BlurSample(gaussian_blur(tile, float(radii[i])), float(radii[i])))
        else:
            out.append(BlurSample(np.asarray(tile).copy(), 0.0))
    return out


def to_tensor(images):
    """uint8 rasters ``(H, W)`` / ``(H, W, C)`` -> float32 ``(N, C, H, W)`` in [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images])
    if arr.ndim == 3:
        arr = arr[:, None]
    else:
        arr = arr.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(arr, dtype=np.float32) / np.float32(255.0)


@dataclass
class QcConfig:
    widths: tuple = (8, 16, 16)
    hidden: int = 16
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 1e-4
    seed: int = 0


def build_regressor(in_ch, widths=(8, 16, 16), hidden=16):
    """Three conv+relu stages with 2x max pooling, global average pool, small dense head."""
    net = []
    c = in_ch
    for w in widths:
        net += [nn.Conv2d(c, w, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2)]
        c = w
    net += [nn.AvgPool2d(None), nn.Linear(c, hidden), nn.ReLU(), nn.Linear(hidden, 1)]
    return net


@dataclass
class BlurRegressor:
    net: list
    store: nn.ParamStore
    losses: list = field(default_factory=list)

    def predict(self, x, batch_size=256):
        out = []
        for i in range(0, len(x), batch_size):
            y, _ = nn.forward(self.net, self.store, x[i:i + batch_size])
            out.append(y.reshape(-1).astype(np.float64))
        return np.concatenate(out) if out else np.zeros(0)


def train_blur_regressor(dataset, cfg=None):
    """Fit the regressor to the blur radii with MSE.  ``losses`` holds the per-epoch mean."""
    cfg = cfg or QcConfig()
    if not dataset:
        raise InvalidInputError("empty dataset")
    x = to_tensor([s.tile for s in dataset])
    y = np.array([s.target_radius for s in dataset], dtype=np.float32)
    rng = np.random.default_rng(cfg.seed)
    net = build_regressor(x.shape[1], cfg.widths, cfg.hidden)
    nn.output_shape(net, x[:1].shape)
    store = nn.init_params(net, rng)
    losses = []
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            _qc_epoch(net, store, x, y, cfg, epoch, rng, losses)
    return BlurRegressor(net, store, losses)


def _qc_epoch(net, store, x, y, cfg, epoch, rng, losses):
    """One pass over the shuffled corpus; appends the mean loss to ``losses``."""
    lr = nn.lr_schedule(epoch, cfg.lr, 0.1, max(1, int(cfg.epochs * 0.7)))
    order = rng.permutation(len(x))
    total = 0.0
    for i in range(0, len(x), cfg.batch_size):
        idx = order[i:i + cfg.batch_size]
        pred, cache = nn.forward(net, store, x[idx])
        resid = pred.reshape(-1) - y[idx]
        loss = float(np.mean(resid.astype(np.float64) ** 2))
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        total += loss * len(idx)
        grad = (2.0 / len(idx) * resid).reshape(pred.shape).astype(np.float32)
        grads, _ = nn.backward(net, store, cache, grad)
        try:
            nn.adam_step(store, grads, lr, cfg.weight_decay)
        except nn.NumericError as exc:
            raise TrainingError(f"diverged at epoch {epoch}: {exc}") from None
    losses.append(total / len(x))


def score_and_filter(refs, images, model, threshold=4.0):
    """Score each tile; keep iff the predicted radius is <= threshold."""
    refs = list(refs)
    if not refs:
        return []
    scores = model.predict(to_tensor(images))
    return [QcVerdict(r, float(s), bool(s <= threshold)) for r, s in zip(refs, scores)]


QC_FIELDS = ["slide_id", "row", "col", "score", "keep"]


def write_qc_report(path, verdicts):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(QC_FIELDS)
        for v in sorted(verdicts, key=lambda v: v.tile_ref):
            r = v.tile_ref
            w.writerow([r.slide_id, r.row, r.col, f"{v.score:.6f}", int(v.keep)])


def read_qc_report(path):
    """Returns ``{(slide_id, row, col): (score, keep)}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        return {
            (r["slide_id"], int(r["row"]), int(r["col"])): (float(r["score"]), r["keep"] == "1")
            for r in csv.DictReader(fh, delimiter="\t")
        }
