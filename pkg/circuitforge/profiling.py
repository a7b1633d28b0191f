"""Wall-clock and memory bookkeeping around code spans."""

import sys
import time
import tracemalloc

try:
    import resource
except ImportError:  # not available on Windows
    resource = None


def peak_rss_bytes():
    """High-water resident set size of this process, or None where the OS does not report it."""
    if resource is None:
        return None
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # Linux reports kilobytes, macOS bytes
    return int(peak) if sys.platform == "darwin" else int(peak) * 1024


class Stopwatch:
    """Monotonic wall clock around a with-block; elapsed_s is set on exit."""

    def __init__(self):
        self.elapsed_s = None
        self._start = None

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed_s = time.perf_counter() - self._start
        return False


class MemoryProbe:
    """Tracks the allocator high-water mark over a with-block using tracemalloc, which also sees numpy buffers.
    peak_alloc_bytes is relative to the allocations live when the block starts."""

    def __init__(self):
        self.peak_alloc_bytes = None
        self.peak_rss_bytes = None
        self._started_here = False
        self._baseline = 0

    def __enter__(self):
        if not tracemalloc.is_tracing():
            tracemalloc.start()
            self._started_here = True
        tracemalloc.reset_peak()
        self._baseline = tracemalloc.get_traced_memory()[0]
        return self

    def __exit__(self, *exc):
        _, peak = tracemalloc.get_traced_memory()
        self.peak_alloc_bytes = max(int(peak - self._baseline), 0)
        self.peak_rss_bytes = peak_rss_bytes()
        if self._started_here:
            tracemalloc.stop()
        return False
