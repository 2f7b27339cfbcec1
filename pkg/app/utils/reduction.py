from typing import Callable, List, Sequence

import numpy as np
from joblib import Parallel, delayed
from joblib.parallel import cpu_count

from app.core.config import settings
from app.core.logging import get_logger

logger = get_logger(__name__)


def parallel_computation(function: Callable, inputs: Sequence, n_jobs: int) -> List:
    """Map over inputs, preserving order. Threads suffice: numpy drops the GIL."""
    if n_jobs <= 1 or len(inputs) <= 1:
        return [function(inp) for inp in inputs]
    n_jobs = min(cpu_count(), n_jobs, len(inputs))
    return Parallel(n_jobs=n_jobs, backend="threading")(delayed(function)(inp) for inp in inputs)


def tree_sum(partials: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise tree over partial sums; the pairing depends only on the count."""
    level = [np.asarray(p, dtype=float) for p in partials]
    if not level:
        return np.zeros(())
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def block_bounds(n: int, block: int) -> List[tuple]:
    return [(s, min(s + block, n)) for s in range(0, n, block)]


def deterministic_sum(values: np.ndarray, block: int = None, axis0_weights: np.ndarray = None) -> np.ndarray:
    """Blocked pairwise sum along axis 0, optionally weighted."""
    values = np.asarray(values, dtype=float)
    if axis0_weights is not None:
        w = np.asarray(axis0_weights, dtype=float)
        values = values * w.reshape((-1,) + (1,) * (values.ndim - 1))
    block = settings.reduction_block if block is None else block
    if values.shape[0] == 0:
        return np.zeros(values.shape[1:])
    return tree_sum([values[s:e].sum(axis=0) for s, e in block_bounds(values.shape[0], block)])
