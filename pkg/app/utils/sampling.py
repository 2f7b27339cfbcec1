import math
import zlib
from typing import Union

import numpy as np
from scipy.stats import qmc

from app.core.logging import get_logger

logger = get_logger(__name__)

Key = Union[int, str]


def _key(k: Key) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    """Child sequence addressed by a path of labels; same path, same stream."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))


def rng(seed: int, *keys: Key) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *keys))


def chunked_normal(seed: int, label: str, n: int, dim: int, chunk: int = 1024) -> np.ndarray:
    """Gaussian samples built from fixed-size chunks.

    The first n rows never depend on how many rows are requested, so a
    larger request is a superset of a smaller one.
    """
    blocks = []
    for c in range(math.ceil(n / chunk)):
        blocks.append(rng(seed, label, c).standard_normal((chunk, dim)))
    if not blocks:
        return np.empty((0, dim))
    return np.concatenate(blocks)[:n]


def chunked_uniform(seed: int, label: str, n: int, dim: int, chunk: int = 1024) -> np.ndarray:
    blocks = [rng(seed, label, c).random((chunk, dim)) for c in range(math.ceil(n / chunk))]
    if not blocks:
        return np.empty((0, dim))
    return np.concatenate(blocks)[:n]


def sobol_points(dim: int, n: int, seed: int, label: str = "sobol") -> np.ndarray:
    """Scrambled Sobol points in [0,1)^dim, a prefix of a power-of-two run."""
    if dim == 0:
        return np.zeros((n, 0))
    sampler = qmc.Sobol(d=dim, scramble=True, seed=rng(seed, label))
    m = max(0, math.ceil(math.log2(max(n, 1))))
    return sampler.random_base2(m)[:n]
