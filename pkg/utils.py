import logging
import os
import time

logger = logging.getLogger(__name__)

LOG_TAGS = ('K', 'stage', 'status', 'family', 'cuts', 'seconds')


def env_int(name: str, default: int) -> int:
    try:
        return int(os.getenv(name, str(default)))
    except Exception:
        logger.warning('invalid integer in %s, using %d', name, default)
        return default


def log_event(logger: logging.Logger, message: str, **kwargs) -> None:
    """Log an event with a short whitelisted set of tags (no matrices or models in log lines)."""
    allowed = {k: v for k, v in kwargs.items() if k in LOG_TAGS}
    logger.info('%s %s', message, allowed)


class Stopwatch:
    """with Stopwatch() as sw: ...; sw.seconds"""

    def __init__(self):
        self.start = None
        self.seconds = 0.0

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
        return False
