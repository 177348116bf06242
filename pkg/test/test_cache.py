from bstc.cache import LRUCache


def test_lru_eviction():
    cache = LRUCache(2)
    cache.put(0.1, "a")
    cache.put(0.2, "b")
    assert cache.get(0.1) == "a"
    cache.put(0.3, "c")
    assert cache.get(0.2) is None
    assert len(cache) == 2
    assert (cache.hits, cache.misses) == (1, 1)


def test_get_or_compute(mocker):
    cache = LRUCache(4)
    compute = mocker.Mock(return_value=42)
    assert cache.get_or_compute(0.5, compute) == 42
    assert cache.get_or_compute(0.5, compute) == 42
    compute.assert_called_once()
