"""
Deterministic parallel evaluation helpers
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """Apply fn to every item, results in input order regardless of thread count"""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))

def fixed_order_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise-tree sum in index order; the result depends only on the inputs"""
    if not arrays:
        raise ValueError("fixed_order_sum needs at least one array")
    level = [np.asarray(a, dtype=np.float64) for a in arrays]
    while len(level) > 1:
        paired = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0]

def fixed_order_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return fixed_order_sum(arrays) / len(arrays)
