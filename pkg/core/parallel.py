import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .conf import get_setting

logger = logging.getLogger(__name__)


def row_bands(height, threads):
    """Split [0, height) into contiguous (start, stop) bands, one per worker."""
    threads = max(1, min(int(threads), height))
    edges = np.linspace(0, height, threads + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def map_row_bands(func, height, threads=None):
    """
    Run func(start, stop) over row bands and stack the results along axis 0.

    Each band writes its own rows, so the output does not depend on the
    number of threads.
    """
    if threads is None:
        threads = get_setting('THREADS')
    bands = row_bands(height, threads)
    if len(bands) == 1:
        return func(*bands[0])
    logger.debug('Rendering %d rows over %d bands', height, len(bands))
    with ThreadPoolExecutor(max_workers=len(bands)) as pool:
        parts = list(pool.map(lambda band: func(*band), bands))
    return np.concatenate(parts, axis=0)


def map_items(func, items, threads=None):
    """Apply func to each item, in order; with one thread this is a plain loop."""
    items = list(items)
    if threads is None:
        threads = get_setting('THREADS')
    workers = max(1, min(int(threads), len(items)))
    if workers == 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
