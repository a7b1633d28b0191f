import numpy as np
import pytest

from circuitforge.pool_util import ordered_map
from circuitforge.profiling import MemoryProbe, Stopwatch, peak_rss_bytes
from circuitforge.rng import named_rng


def test_streams_are_reproducible_and_independent():
    a = named_rng(7, "bootstrap", 3).random(5)
    np.testing.assert_array_equal(a, named_rng(7, "bootstrap", 3).random(5))
    assert not np.array_equal(a, named_rng(7, "bootstrap", 4).random(5))
    assert not np.array_equal(a, named_rng(7, "pairing", 3).random(5))
    assert not np.array_equal(a, named_rng(8, "bootstrap", 3).random(5))


def test_unknown_stream():
    with pytest.raises(KeyError):
        named_rng(0, "weights")


def test_stopwatch_measures_elapsed_time():
    with Stopwatch() as clock:
        sum(range(10000))
    assert clock.elapsed_s > 0


def test_memory_probe_sees_numpy_buffers():
    with MemoryProbe() as probe:
        block = np.ones(1_000_000)
        del block
    assert probe.peak_alloc_bytes >= 8_000_000
    assert peak_rss_bytes() is None or probe.peak_rss_bytes > 0


def test_ordered_map_keeps_input_order():
    assert ordered_map(abs, [-3, 1, -2]) == [3, 1, 2]
    assert ordered_map(abs, [-3, 1, -2, 5], workers=2) == [3, 1, 2, 5]
