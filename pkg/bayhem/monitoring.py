import logging
from functools import wraps
from time import perf_counter
from typing import Any, Callable, Optional

from bayhem.errors import BayHEmError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = "INFO") -> None:
    """Configure root logging once for command-line use; library code only creates loggers."""
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ValueError(f"Unknown log level: {level}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    logging.getLogger().setLevel(numeric)


def timed(label: str, slow_after: float = 5.0):
    """
    Decorator to monitor how long an operation takes.

    Args:
        label (str): Identifier for the operation being monitored.
        slow_after (float): Seconds after which the call is reported as slow.

    Returns:
        function: A decorator that logs the duration of each call.
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                duration = perf_counter() - start_time
                logger.debug(f"{label} failed after {duration:.3f}s: {e}")
                raise
            duration = perf_counter() - start_time
            logger.debug(f"{label} took {duration:.3f}s")
            if duration > slow_after:
                logger.warning(f"Slow operation detected - {label}: {duration:.2f}s")
            return result
        return wrapper
    return decorator


def with_fallback(default_value: Any = None, on_error: Optional[Callable[[BaseException], None]] = None):
    """
    Decorator that turns library errors into a fallback value.

    The error is logged with its traceback and handed to ``on_error`` so the
    caller can record it; any exception outside the package hierarchy (or a
    numpy/scipy failure) is treated the same way.

    Args:
        default_value: Value to return if the operation fails.
        on_error: Optional callback receiving the exception.
    """
    def decorator(func: Callable):
        @wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except (BayHEmError, ArithmeticError, ValueError) as e:
                logger.exception(f"Error in {func.__name__}")
                if on_error is not None:
                    on_error(e)
                return default_value
        return wrapper
    return decorator
