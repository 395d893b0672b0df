"""Shared dependencies: cached volume loading."""

import logging
import os
from functools import lru_cache
from pathlib import Path

from cachetools import LRUCache

from pournet.config import settings
from pournet.services.volume import Volume3D, read_volume

logger = logging.getLogger(__name__)


class VolumeCache:
    """LRU cache of decoded VVOL1 files keyed by path and modification stamp."""

    def __init__(self, maxsize: int | None = None):
        self.maxsize = maxsize or settings.VOLUME_CACHE_SIZE
        self._cache: LRUCache = LRUCache(maxsize=self.maxsize)
        self.hits = 0
        self.misses = 0

    def generate_key(self, path: str | Path) -> tuple[str, int, int]:
        """Cache key: resolved path, mtime and size, so rewritten files are re-read."""
        resolved = Path(path).resolve()
        stat = os.stat(resolved)
        return str(resolved), stat.st_mtime_ns, stat.st_size

    def load(self, path: str | Path) -> Volume3D:
        """Read a volume, serving repeated reads of an unchanged file from memory."""
        key = self.generate_key(path)
        volume = self._cache.get(key)
        if volume is not None:
            self.hits += 1
            logger.debug(f"Volume cache hit: {key[0]}")
            return volume
        self.misses += 1
        logger.debug(f"Volume cache miss: {key[0]}")
        volume = read_volume(path)
        self._cache[key] = volume
        return volume

    def clear(self) -> None:
        self._cache.clear()


@lru_cache()
def get_volume_cache() -> VolumeCache:
    """Get or create the process-wide volume cache."""
    return VolumeCache()
