"""Convolutional autoencoder trained jointly for reconstruction and clustering.

Each epoch: mini-batch updates of the network against the centroids and
assignments from the previous epoch, then re-embed every sample, reassign
to the nearest centroid and recompute centroids as member means.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn

log = logging.getLogger(__name__)


class InvalidInputError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    k: int = 24
    lam: float = 0.4
    epochs: int = 125
    base_lr: float = 1e-2
    weight_decay: float = 1e-4
    lr_decay: float = 0.1
    lr_period: int = 50
    batch_size: int = 64
    sample_cap: int = 500_000
    seed: int = 0
    # False gives the literal un-normalized clustering term
    normalize_cluster_term: bool = True
    widths: tuple = (16, 32)
    blocks_per_stage: int = 2
    decoder_layers: int = 5

    def __post_init__(self):
        if self.k < 2:
            raise InvalidInputError("k must be >= 2")
        if self.lam < 0:
            raise InvalidInputError("lambda must be >= 0")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")


@dataclass
class Autoencoder:
    encoder: list
    decoder: list
    store: nn.ParamStore

    def encode(self, x):
        return nn.forward(self.encoder, self.store, x, "enc.")

    def decode(self, h):
        return nn.forward(self.decoder, self.store, h, "dec.")


def build_autoencoder(in_ch, tile_size, widths=(16, 32), blocks_per_stage=2,
                      decoder_layers=5, rng=None, min_channels=8):
    """Residual encoder (no batch norm) and an upsample+conv decoder.

    The encoder downsamples by 8; the decoder runs ``decoder_layers`` stride-1
    padding-1 convolutions, the first ``log2(8)`` of them preceded by 2x
    nearest upsampling, with channel count halving toward the output.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    enc = [nn.Conv2d(in_ch, widths[0], 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2)]
    c = widths[0]
    for s, w in enumerate(widths):
        for b in range(blocks_per_stage):
            enc.append(nn.ResidualBlock(c, w, 2 if (s > 0 and b == 0) else 1))
            c = w
    enc.append(nn.MaxPool2d(2))
    try:
        out_shape = nn.output_shape(enc, (1, in_ch, tile_size, tile_size))
    except nn.ShapeError as exc:
        raise InvalidInputError(f"tile size {tile_size} incompatible with the encoder: {exc}") from None
    n_up = int(round(math.log2(tile_size / out_shape[2])))
    if 2 ** n_up * out_shape[2] != tile_size or n_up > decoder_layers:
        raise InvalidInputError(f"tile size {tile_size} incompatible with encoder output {out_shape}")
    dec = []
    for i in range(decoder_layers):
        if i < n_up:
            dec.append(nn.Upsample(2))
        last = i == decoder_layers - 1
        nxt = in_ch if last else max(c // 2, min_channels)
        dec.append(nn.Conv2d(c, nxt, 3, 1, 1))
        if not last:
            dec.append(nn.ReLU())
        c = nxt
    store = nn.init_params(enc, rng, "enc.").merge(nn.init_params(dec, rng, "dec."))
    return Autoencoder(enc, dec, store)


def model_for(cfg, in_ch, tile_size):
    rng = np.random.default_rng([cfg.seed, 0])
    return build_autoencoder(in_ch, tile_size, cfg.widths, cfg.blocks_per_stage,
                             cfg.decoder_layers, rng)


def embed(model, x, batch_size=256):
    """Flattened encoder output, one row per sample."""
    rows = []
    for i in range(0, len(x), batch_size):
        h, _ = model.encode(x[i:i + batch_size])
        rows.append(h.reshape(len(h), -1))
    if not rows:
        raise InvalidInputError("empty batch")
    return np.concatenate(rows)


def rc_loss(x, x_rec, z, c_star, lam, normalize=True):
    """Reconstruction-clustering objective for one batch (float64)."""
    n = len(x)
    recon = nn.mse(x, x_rec)
    diff = z.reshape(n, -1).astype(np.float64) - c_star.reshape(n, -1).astype(np.float64)
    dist = (diff ** 2).sum(axis=1)
    clus = dist.mean() if normalize else dist.sum()
    total = recon + lam * clus
    if not math.isfinite(total):
        raise TrainingError("non-finite loss")
    return float(total)


def rc_loss_parts(x, x_rec, z, c_star, lam, normalize=True):
    n = len(x)
    recon = nn.mse(x, x_rec)
    diff = z.reshape(n, -1).astype(np.float64) - c_star.reshape(n, -1).astype(np.float64)
    dist = (diff ** 2).sum(axis=1)
    clus = float(dist.mean() if normalize else dist.sum())
    return recon + lam * clus, recon, clus


def rc_loss_grads(x, x_rec, z, c_star, lam, normalize=True):
    """Gradients of :func:`rc_loss` w.r.t. the reconstruction and the embedding."""
    n = len(x)
    d_rec = (2.0 / n) * (x_rec - x)
    scale = 2.0 * lam / n if normalize else 2.0 * lam
    d_z = scale * (z - c_star.reshape(z.shape).astype(z.dtype))
    return d_rec.astype(x_rec.dtype), d_z.astype(z.dtype)


# ---------------------------------------------------------------------------
# clustering steps


@dataclass
class CentroidSet:
    centers: np.ndarray
    epoch: int = 0
    empty: np.ndarray = None

    def __post_init__(self):
        if self.empty is None:
            self.empty = np.zeros(len(self.centers), dtype=bool)

    @property
    def k(self):
        return len(self.centers)


def assign_clusters(z, centroids, chunk=512):
    """Nearest centroid by squared Euclidean distance; ties go to the lower index."""
    z = np.asarray(z, dtype=np.float64)
    if len(z) == 0:
        raise InvalidInputError("no embeddings to assign")
    c = np.asarray(getattr(centroids, "centers", centroids), dtype=np.float64)
    if z.shape[1] != c.shape[1]:
        raise InvalidInputError(f"embedding dim {z.shape[1]} != centroid dim {c.shape[1]}")
    out = np.empty(len(z), dtype=np.int64)
    for i in range(0, len(z), chunk):
        d = ((z[i:i + chunk, None, :] - c[None]) ** 2).sum(axis=2)
        out[i:i + chunk] = d.argmin(axis=1)
    return out


def update_centroids(z, labels, prev):
    """Member means; an empty cluster keeps its previous center and is flagged."""
    z = np.asarray(z, dtype=np.float64)
    k = prev.k
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, z.shape[1]))
    np.add.at(sums, labels, z)
    empty = counts == 0
    centers = np.where(empty[:, None], prev.centers, sums / np.maximum(counts, 1)[:, None])
    return CentroidSet(centers.astype(np.float32), prev.epoch + 1, empty)


def init_centroids(k, x, model, seed):
    """Uniform random labels, then centroids = per-label means of the embeddings."""
    if k < 2:
        raise InvalidInputError("k must be >= 2")
    if len(x) == 0:
        raise InvalidInputError("empty corpus")
    rng = np.random.default_rng([seed, 1])
    labels = rng.integers(0, k, len(x))
    z = embed(model, x)
    # an empty initial cluster starts at a random sample
    fallback = z[rng.integers(0, len(z), k)].astype(np.float64)
    cs = update_centroids(z, labels, CentroidSet(fallback, -1))
    cs.epoch = 0
    return cs, labels


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Autoencoder
    centroids: CentroidSet
    labels: np.ndarray
    trace: list = field(default_factory=list)
    history: list = field(default_factory=list)


def subsample(n, cap, seed):
    """Sorted indices of a seeded uniform sample without replacement."""
    if n <= cap:
        return np.arange(n)
    rng = np.random.default_rng([seed, 3])
    return np.sort(rng.choice(n, cap, replace=False))


def _epoch(model, x, cfg, epoch, rng, targets=None):
    lr = nn.lr_schedule(epoch, cfg.base_lr, cfg.lr_decay, cfg.lr_period)
    order = rng.permutation(len(x))
    tot = rec = clu = 0.0
    for i in range(0, len(x), cfg.batch_size):
        idx = order[i:i + cfg.batch_size]
        xb = x[idx]
        h, enc_cache = model.encode(xb)
        xr, dec_cache = model.decode(h)
        if targets is None:
            loss = nn.mse(xb, xr)
            parts = (loss, loss, 0.0)
            d_rec = ((2.0 / len(xb)) * (xr - xb)).astype(xr.dtype)
            d_z = None
        else:
            c_star = targets[idx]
            parts = rc_loss_parts(xb, xr, h, c_star, cfg.lam, cfg.normalize_cluster_term)
            d_rec, d_z = rc_loss_grads(xb, xr, h, c_star, cfg.lam, cfg.normalize_cluster_term)
        if not math.isfinite(parts[0]):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        g_dec, d_h = nn.backward(model.decoder, model.store, dec_cache, d_rec, "dec.")
        if d_z is not None:
            d_h = d_h + d_z
        g_enc, _ = nn.backward(model.encoder, model.store, enc_cache, d_h, "enc.")
        try:
            nn.adam_step(model.store, {**g_enc, **g_dec}, lr, cfg.weight_decay)
        except nn.NumericError as exc:
            raise TrainingError(f"diverged at epoch {epoch}: {exc}") from None
        w = len(idx)
        tot += parts[0] * w
        rec += parts[1] * w
        clu += parts[2] * w
    n = len(x)
    return {"epoch": epoch, "lr": lr, "loss": tot / n, "recon": rec / n, "cluster": clu / n}


def train(x, cfg, model=None, record_history=False, callback=None):
    """Joint training.  ``x`` is a float32 ``(N, C, H, W)`` corpus."""
    if len(x) < cfg.k:
        raise InvalidInputError(f"corpus of {len(x)} tiles is smaller than k={cfg.k}")
    if model is None:
        model = model_for(cfg, x.shape[1], x.shape[2])
    centroids, labels = init_centroids(cfg.k, x, model, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    result = TrainResult(model, centroids, labels)
    for epoch in range(cfg.epochs):
        targets = centroids.centers[labels]
        stats = _epoch(model, x, cfg, epoch, rng, targets)
        z = embed(model, x)
        labels = assign_clusters(z, centroids)
        centroids = update_centroids(z, labels, centroids)
        stats["n_empty"] = int(centroids.empty.sum())
        if stats["n_empty"]:
            log.warning("epoch %d: %d empty clusters kept their previous centers", epoch, stats["n_empty"])
        result.trace.append(stats)
        if record_history:
            result.history.append(labels.copy())
        if callback is not None:
            callback(stats)
    result.centroids, result.labels = centroids, labels
    return result


def train_autoencoder(x, cfg, model=None):
    """Plain reconstruction-only training with the same seeding as :func:`train`."""
    if model is None:
        model = model_for(cfg, x.shape[1], x.shape[2])
    rng = np.random.default_rng([cfg.seed, 2])
    return model, [_epoch(model, x, cfg, e, rng) for e in range(cfg.epochs)]


def purity(labels, truth):
    """Fraction of samples whose cluster's majority true label equals their own."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    hits = 0
    for c in np.unique(labels):
        hits += np.bincount(truth[labels == c]).max()
    return hits / len(labels)
