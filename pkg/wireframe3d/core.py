from __future__ import annotations

import json
import shutil
from concurrent.futures import ThreadPoolExecutor, as_completed
from hashlib import sha1
from pathlib import Path
from typing import Any, Callable, Dict, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

CacheRecord = Dict[str, Any]


class Wireframe3DError(RuntimeError):
    """Base class for all errors raised by wireframe3d."""


class ModelFileError(Wireframe3DError):
    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class DimensionError(Wireframe3DError):
    pass


class DepthSingularity(Wireframe3DError):
    def __init__(self, index: int, denominator: float) -> None:
        self.index = index
        self.denominator = denominator
        super().__init__(
            f"Keypoint {index} is behind or on the camera plane "
            f"(depth denominator {denominator:.3g})"
        )


class RejectionExhausted(Wireframe3DError):
    pass


class DegenerateInput(Wireframe3DError):
    pass


class TrainingDiverged(Wireframe3DError):
    def __init__(self, epoch: int, last_finite_loss: float | None) -> None:
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"Training diverged in epoch {epoch}; last finite loss: {last_finite_loss!r}"
        )


class DatasetFormatError(Wireframe3DError):
    pass


class TrainingAborted(Wireframe3DError):
    pass


def derive_seed(seed: int, *indices: int) -> int:
    """Derive an independent 64-bit seed for the stream identified by ``indices``."""
    sequence = np.random.SeedSequence([seed, *indices])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *indices))


def content_hash(*parts: Any) -> str:
    """Create a stable key using a sha1 hash of ``parts``."""
    digest = sha1()
    for part in parts:
        digest.update(part if isinstance(part, bytes) else str(part).encode())
    return digest.hexdigest()


def parallel_map(
    fn: Callable[[T], R], items: Sequence[T], threads: int = 1
) -> list[R]:
    """Apply ``fn`` to every item, optionally on a thread pool.

    Results are always returned in input order, so the outcome does not depend
    on ``threads``.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    results: dict[int, R] = {}
    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {executor.submit(fn, item): i for i, item in enumerate(items)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return [results[i] for i in range(len(items))]


class ResultCache:
    """Simple hybrid file system / memory cache for per-sample fit results.

    Follows the
    `Cache Directory Tagging Specification <http://www.brynosaurus.com/cachedir/>`_.
    """

    def __init__(self, cache_dir: Path | str = ".wireframe3d_cache") -> None:
        self.cache_dir = Path(cache_dir)
        self.cache_content_dir = self.cache_dir / "fit"
        self._cache: dict[str, CacheRecord] = {}
        self._touched: set[str] = set()
        self._load()

    def _init_cache_dir(self) -> None:
        self.cache_content_dir.mkdir(exist_ok=True, parents=True)
        cachedir_tag = self.cache_dir / "CACHEDIR.TAG"
        gitignore_file = self.cache_dir / ".gitignore"
        if not cachedir_tag.exists():
            cachedir_tag.write_text(
                """Signature: 8a477f597d28d172789f06886806bc55
# This file is a cache directory tag created by wireframe3d.
# For information about cache directory tags, see:
#	http://www.brynosaurus.com/cachedir/"""
            )
        if not gitignore_file.exists():
            gitignore_file.write_text("*\n")

    def _load(self) -> None:
        self._init_cache_dir()

        cache: dict[str, CacheRecord] = {}
        with ThreadPoolExecutor() as executor:
            futures = {
                executor.submit(file.read_text): file.name
                for file in self.cache_content_dir.iterdir()
            }
            for future in as_completed(futures):
                cache[futures[future]] = json.loads(future.result())
        self._cache.update(cache)

    @staticmethod
    def make_cache_key(*parts: Any) -> str:
        return content_hash(*parts)

    def get(self, key: str) -> CacheRecord | None:
        """Get the record stored under ``key``."""
        self._touched.add(key)
        return self._cache.get(key)

    def set(self, key: str, record: CacheRecord) -> None:
        self._cache[key] = record
        self._touched.add(key)

    def persist(self, evict: bool = True) -> None:
        """
        Persist internal cache to disk. If ``evict`` is ``True``, evict unused items.
        """
        with ThreadPoolExecutor() as executor:
            for key, record in self._cache.items():
                if key in self._touched:
                    executor.submit(
                        self.cache_content_dir.joinpath(key).write_text,
                        json.dumps(record, sort_keys=True),
                    )
                elif evict:
                    executor.submit(
                        self.cache_content_dir.joinpath(key).unlink, missing_ok=True
                    )

    def clear_all(self) -> None:
        """Clear all cached items from memory and disk."""
        self._cache = {}
        self._touched = set()

        if not self.cache_dir.exists():
            return

        shutil.rmtree(self.cache_dir)
