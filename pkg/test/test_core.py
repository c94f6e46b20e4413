import json
import threading

import numpy as np
import pytest
from wireframe3d.core import (
    DepthSingularity,
    ResultCache,
    content_hash,
    derive_seed,
    make_rng,
    parallel_map,
)


def test_get_not_found(cache: ResultCache) -> None:
    assert cache.get("foo") is None


def test_get(cache: ResultCache) -> None:
    cache.cache_content_dir.joinpath("foo").write_text(json.dumps({"cost": 1.5}))
    cache._load()

    assert cache.get("foo") == {"cost": 1.5}
    assert cache._cache["foo"] == {"cost": 1.5}


def test_set(cache: ResultCache) -> None:
    cache.set("foo", {"s": [1.0, 2.0]})

    assert cache.get("foo") == {"s": [1.0, 2.0]}


@pytest.mark.parametrize("evict", [True, False])
def test_persist(cache: ResultCache, evict: bool) -> None:
    test_file_one = cache.cache_content_dir.joinpath("one")
    test_file_two = cache.cache_content_dir.joinpath("two")
    test_file_one.write_text(json.dumps({"cost": 1.0}))
    test_file_two.write_text(json.dumps({"cost": 2.0}))
    cache._load()

    cache.get("two")
    cache.set("three", {"cost": 3.0})

    cache.persist(evict=evict)

    if evict:
        assert not test_file_one.exists()
    else:
        assert test_file_one.exists()
    assert cache.cache_content_dir.joinpath("two").exists()
    assert json.loads(cache.cache_content_dir.joinpath("three").read_text()) == {"cost": 3.0}


def test_persisted_records_survive_reload(cache: ResultCache) -> None:
    cache.set("key", {"converged": True, "cost": float("inf")})
    cache.persist()

    reloaded = ResultCache(cache.cache_dir)

    assert reloaded.get("key") == {"converged": True, "cost": float("inf")}


def test_cache_dir_is_tagged(cache: ResultCache) -> None:
    tag = cache.cache_dir.joinpath("CACHEDIR.TAG").read_text()

    assert tag.startswith("Signature: 8a477f597d28d172789f06886806bc55")
    assert cache.cache_dir.joinpath(".gitignore").read_text() == "*\n"


def test_clear_all(cache: ResultCache) -> None:
    cache.set("foo", {"cost": 0.0})

    cache.clear_all()

    assert not cache.cache_dir.exists()
    assert cache.get("foo") is None


def test_make_cache_key_is_stable() -> None:
    key = ResultCache.make_cache_key("abc", b"\x00\x01", 3)

    assert key == content_hash("abc", b"\x00\x01", 3)
    assert len(key) == 40
    assert key != ResultCache.make_cache_key("abc", b"\x00\x02", 3)


def test_derive_seed_depends_on_every_index() -> None:
    seeds = {derive_seed(0, i, j) for i in range(5) for j in range(5)}

    assert len(seeds) == 25
    assert derive_seed(7, 3) == derive_seed(7, 3)
    assert derive_seed(7, 3) != derive_seed(8, 3)


def test_make_rng_streams_are_reproducible() -> None:
    a = make_rng(11, 4).random(5)
    b = make_rng(11, 4).random(5)

    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("threads", [1, 2, 8])
def test_parallel_map_keeps_input_order(threads: int) -> None:
    items = list(range(50))

    assert parallel_map(lambda x: x * x, items, threads) == [x * x for x in items]


def test_parallel_map_uses_worker_threads() -> None:
    seen: set[int] = set()
    barrier = threading.Barrier(2, timeout=5)

    def work(item: int) -> int:
        seen.add(threading.get_ident())
        barrier.wait()
        return item

    assert parallel_map(work, [0, 1], threads=2) == [0, 1]
    assert len(seen) == 2


def test_parallel_map_propagates_errors() -> None:
    def work(item: int) -> int:
        if item == 3:
            raise DepthSingularity(3, -0.5)
        return item

    with pytest.raises(DepthSingularity) as exc_info:
        parallel_map(work, list(range(6)), threads=3)

    assert exc_info.value.index == 3
    assert "Keypoint 3" in str(exc_info.value)
