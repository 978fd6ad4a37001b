"""Bounded in-process memo for expensive Monte Carlo oracles."""

import json
import logging
import threading
from collections import OrderedDict
from enum import Enum
from functools import wraps
from typing import Any, Callable, TypeVar

from pydantic import BaseModel

logger = logging.getLogger(__name__)

T = TypeVar("T")


class ResultCache:
    """Thread-safe least-recently-used cache.

    Attributes:
        max_entries: Entries kept before the least recently used is evicted.
    """

    def __init__(self, max_entries: int = 128) -> None:
        if max_entries < 1:
            raise ValueError("max_entries must be at least 1")
        self._cache: OrderedDict[str, Any] = OrderedDict()
        self._lock = threading.Lock()
        self.max_entries = max_entries
        self._hits = 0
        self._misses = 0

    def get(self, key: str) -> tuple[Any, bool]:
        """Get a value from the cache.

        Returns:
            Tuple of (value, found). If found is False, value is None.
        """
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                self._hits += 1
                logger.debug(f"Cache hit for key: {key}")
                return self._cache[key], True
            self._misses += 1
            return None, False

    def set(self, key: str, value: Any) -> None:
        with self._lock:
            self._cache[key] = value
            self._cache.move_to_end(key)
            while len(self._cache) > self.max_entries:
                evicted, _ = self._cache.popitem(last=False)
                logger.debug(f"Evicted cache key: {evicted}")

    def clear(self) -> int:
        """Clear all entries and return how many were removed."""
        with self._lock:
            count = len(self._cache)
            self._cache.clear()
            logger.debug(f"Cleared {count} cache entries")
            return count

    def stats(self) -> dict[str, Any]:
        with self._lock:
            return {
                "entries": len(self._cache),
                "max_entries": self.max_entries,
                "hits": self._hits,
                "misses": self._misses,
            }


_oracle_cache: ResultCache | None = None


def get_oracle_cache() -> ResultCache:
    """Get the global cache for population-limit oracles."""
    global _oracle_cache
    if _oracle_cache is None:
        _oracle_cache = ResultCache(max_entries=128)
    return _oracle_cache


def _jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, Enum):
        return value.value
    raise TypeError(f"Cannot build a cache key from {type(value).__name__}")


def cache_key(prefix: str, *args: Any, **kwargs: Any) -> str:
    """Stable JSON rendering of a call."""
    return prefix + ":" + json.dumps(
        {"args": list(args), "kwargs": kwargs}, sort_keys=True, default=_jsonable
    )


def memoized(key_prefix: str = "") -> Callable[[Callable[..., T]], Callable[..., T]]:
    """Decorator caching results in the oracle cache.

    Arguments must be JSON-serializable, pydantic models or enums.
    """

    def decorator(func: Callable[..., T]) -> Callable[..., T]:
        @wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> T:
            cache = get_oracle_cache()
            key = cache_key(key_prefix or func.__qualname__, *args, **kwargs)
            value, found = cache.get(key)
            if found:
                return value  # type: ignore[no-any-return]
            result = func(*args, **kwargs)
            cache.set(key, result)
            return result

        return wrapper

    return decorator
