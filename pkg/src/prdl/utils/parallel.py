"""
Ordered fan-out over a thread pool.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from tqdm import tqdm

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(
    func: Callable[[T], R],
    items: Iterable[T],
    threads: int = 1,
    desc: Optional[str] = None,
) -> List[R]:
    """
    Apply ``func`` to every item, results in input order.

    Args:
        func: Work function; must not share mutable state between calls
        items: Inputs
        threads: Worker count; 1 runs inline
        desc: Show a tqdm progress bar with this label

    Returns:
        List of results aligned with ``items``
    """
    items = list(items)
    if threads <= 1:
        iterator = tqdm(items, desc=desc, leave=False) if desc else items
        return [func(item) for item in iterator]

    with ThreadPoolExecutor(max_workers=threads) as executor:
        results = executor.map(func, items)
        if desc:
            results = tqdm(results, total=len(items), desc=desc, leave=False)
        return list(results)
