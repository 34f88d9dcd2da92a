"""Expensive seeded artifacts shared by the unit tests and the acceptance run."""
import functools

import numpy as np

from histocluster import qc
from histocluster.synthetic import tissue_tile

QC_TILE = 32


def tissue_tiles(n, seed):
    rng = np.random.default_rng(seed)
    return [tissue_tile(rng, QC_TILE) for _ in range(n)]


@functools.lru_cache(maxsize=None)
def trained_qc():
    """Blur regressor trained on 600 synthetic tissue tiles (half blurred)."""
    data = qc.make_blur_dataset(tissue_tiles(600, 100), seed=101)
    return qc.train_blur_regressor(data, qc.QcConfig(seed=102))


@functools.lru_cache(maxsize=None)
def heldout_tiles():
    return tuple(tissue_tiles(400, 200))
