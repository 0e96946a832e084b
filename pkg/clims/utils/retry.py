# clims/utils/retry.py
import logging

from tenacity import before_sleep_log, retry, retry_if_exception, stop_after_attempt, wait_exponential

logger = logging.getLogger(__name__)

_TRANSIENT_MARKERS = ("disconnected", "timeout", "timed out", "remote", "eof", "connection", "temporarily")


def _is_transient(exc: BaseException) -> bool:
    if isinstance(exc, (ConnectionError, TimeoutError)):
        return True
    return isinstance(exc, OSError) and any(m in str(exc).lower() for m in _TRANSIENT_MARKERS)


def retry_transient(max_retries: int = 3, backoff: float = 2):
    """Retry network-bound loaders (model hub downloads) on transient failures."""
    return retry(
        retry=retry_if_exception(_is_transient),
        stop=stop_after_attempt(max_retries),
        wait=wait_exponential(multiplier=1, exp_base=backoff, max=30),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    )
