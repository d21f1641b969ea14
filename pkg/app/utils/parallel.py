import logging

import numba

logger = logging.getLogger(__name__)


def set_threads(threads: int) -> int:
    """Size numba's worker pool for the following parallel kernels.

    Kernels partition work by cell or particle index and never reduce across
    threads, so results do not depend on the count.
    """
    available = numba.config.NUMBA_NUM_THREADS
    count = min(max(int(threads), 1), available)
    if count < threads:
        logger.warning("Requested %d threads, numba provides %d", threads, available)
    numba.set_num_threads(count)
    return count
