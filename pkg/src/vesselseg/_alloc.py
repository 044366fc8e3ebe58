"""Allocator tuning for large-array workloads.

glibc serves allocations above M_MMAP_THRESHOLD straight from mmap and
returns them on free, so every big numpy temporary re-faults its pages.
Raising the threshold keeps those buffers on the heap for reuse, which is
worth >1.5x on the conv-heavy paths. Best effort: silently skipped where
glibc is unavailable.
"""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(limit: int = 1 << 30) -> bool:
    try:
        path = ctypes.util.find_library("c")
        libc = ctypes.CDLL(path) if path else ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, limit)
        libc.mallopt(_M_TRIM_THRESHOLD, limit)
        return True
    except (OSError, AttributeError):
        return False
