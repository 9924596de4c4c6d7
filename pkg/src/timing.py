"""Wall-clock timing with slow-operation warnings."""

from contextlib import contextmanager
from typing import Iterator, Optional
import logging
import time

from src.config import config

logger = logging.getLogger("ckt.timing")


class Stopwatch:
    """Elapsed time holder filled in when a ``timed`` block exits."""

    def __init__(self) -> None:
        self.start = time.perf_counter()
        self.duration_ms = 0.0

    def stop(self) -> float:
        self.duration_ms = (time.perf_counter() - self.start) * 1000.0
        return self.duration_ms


@contextmanager
def timed(label: str, slow_ms: Optional[float] = None) -> Iterator[Stopwatch]:
    """
    Log ``label`` and its duration when the block finishes.

    Args:
        label: Short description of the timed operation.
        slow_ms: Duration threshold for WARNING logs. Defaults to
            ``CKT_SLOW_SIM_MS`` (5 if unset).
    """
    if slow_ms is None:
        slow_ms = config.SLOW_SIM_MS
    watch = Stopwatch()
    try:
        yield watch
    finally:
        duration_ms = watch.stop()
        msg = f"{label} {duration_ms:.1f}ms"
        if duration_ms >= slow_ms:
            logger.warning("slow: %s", msg)
        else:
            logger.info(msg)
