"""Seeded synthetic data: tissue-like tiles, texture corpora, slides, cohorts."""
from __future__ import annotations

import numpy as np


def tissue_tile(rng, size=32, channels=1, dense=False):
    """Bright background with dark blobs and nucleus-sized dots (uint8).

    ``dense`` packs the tile with nuclei on a darker stroma, a second
    phenotype for the demo cohort.
    """
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.full((size, size), 150.0 if dense else 225.0)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(size * 0.08, size * 0.3, 2)
        img[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1] = rng.uniform(130, 180)
    lo, hi = (2 * size, 3 * size) if dense else (size // 2, size)
    for _ in range(rng.integers(lo, hi)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(0.8, 2.2)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = rng.uniform(30, 90)
    img = np.clip(img + rng.normal(0, 3, img.shape), 0, 255)
    img = np.rint(img).astype(np.uint8)
    if channels == 3:
        tint = np.array([1.0, 0.85, 0.95])
        img = np.clip(np.rint(img[..., None] * tint), 0, 255).astype(np.uint8)
    return img


TEXTURES = ("constant", "stripes", "checkerboard")


def texture_tile(rng, kind, size=32, band=4):
    """One float32 tile in [0, 1]: random brightness and contrast, grid-aligned pattern."""
    yy, xx = np.mgrid[0:size, 0:size]
    level = rng.uniform(0.4, 0.6)
    amp = rng.uniform(0.2, 0.35)
    if kind == "constant":
        pattern = np.zeros((size, size))
    elif kind == "stripes":
        pattern = np.where((yy // band) % 2 == 0, 1.0, -1.0)
    elif kind == "checkerboard":
        pattern = np.where(((yy // band) + (xx // band)) % 2 == 0, 1.0, -1.0)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    img = level + amp * pattern + rng.normal(0, 0.03, (size, size))
    return np.clip(img, 0, 1).astype(np.float32)


def texture_corpus(n, seed, size=32):
    """``n`` tiles cycling through the three textures; returns ``(x, labels)``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(TEXTURES)
    rng.shuffle(labels)
    x = np.stack([texture_tile(rng, TEXTURES[k], size) for k in labels])[:, None]
    return np.ascontiguousarray(x), labels


def synthetic_slide(rng, width, height, tile=32, tissue_frac=0.6, dense_frac=0.0):
    """A bright slide with a dark tissue region built from tissue tiles, plus specks of dirt.

    A fraction ``dense_frac`` of the tissue tiles use the dense phenotype.
    """
    img = np.full((height, width, 3), 235, dtype=np.uint8)
    img = np.clip(img.astype(int) + rng.integers(-3, 4, img.shape), 0, 255).astype(np.uint8)
    th, tw = height // tile, width // tile
    cy, cx = rng.uniform(0.35, 0.65) * th, rng.uniform(0.35, 0.65) * tw
    ry, rx = th * tissue_frac / 2, tw * tissue_frac / 2
    for r in range(th):
        for c in range(tw):
            if ((r + 0.5 - cy) / ry) ** 2 + ((c + 0.5 - cx) / rx) ** 2 <= 1:
                patch = tissue_tile(rng, tile, 3, dense=rng.random() < dense_frac)
                img[r * tile:(r + 1) * tile, c * tile:(c + 1) * tile] = np.minimum(patch, 200)
    # isolated dirt specks (single tile-sized dark spots) far from the tissue
    for _ in range(2):
        r, c = rng.integers(0, th), rng.integers(0, tw)
        if ((r + 0.5 - cy) / ry) ** 2 + ((c + 0.5 - cx) / rx) ** 2 > 2.5:
            img[r * tile:(r + 1) * tile, c * tile:(c + 1) * tile] = 60
    return img


def planted_cohort(rng, n=200, hazard_ratio=2.0, prevalence=0.5, base_rate=0.03,
                   censor_rate=0.003, max_followup=120.0):
    """Exponential survival with one binary covariate; returns ``(time, event, x)``."""
    x = (rng.random(n) < prevalence).astype(np.int8)
    rate = base_rate * hazard_ratio ** x
    t_event = rng.exponential(1.0 / rate)
    t_cens = np.minimum(rng.exponential(1.0 / censor_rate, n), max_followup)
    time = np.minimum(t_event, t_cens)
    event = t_event <= t_cens
    return time, event, x


def write_demo_cohort(out_dir, n_slides=6, seed=0, tile=32, grid=(10, 12), hazard_ratio=3.0):
    """Synthetic slides plus a manifest (``manifest.tsv``) under ``out_dir``; returns the manifest path.

    Half of the slides carry the dense tile phenotype, and those slides have
    ``hazard_ratio`` times the baseline recurrence hazard.
    """
    from pathlib import Path

    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_slides):
        sid = f"S{i:03d}"
        dense = i % 2 == 1
        img = synthetic_slide(rng, grid[1] * tile, grid[0] * tile, tile, dense_frac=0.4 if dense else 0.0)
        Image.fromarray(img).save(out / f"{sid}.png")
        rate = 0.03 * (hazard_ratio if dense else 1.0)
        t_event = rng.exponential(1.0 / rate)
        t_cens = min(rng.exponential(1.0 / 0.005), 120.0)
        rows.append(f"{sid}\t{sid}.png\t\t{max(min(t_event, t_cens), 0.01):.3f}\t{int(t_event <= t_cens)}")
    manifest = out / "manifest.tsv"
    manifest.write_text("slide_id\timage\tannotation\ttime_months\tevent\n" + "\n".join(rows) + "\n")
    return manifest
