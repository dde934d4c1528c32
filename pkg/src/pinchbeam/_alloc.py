"""glibc allocator tuning for the numeric hot paths.

The forward/backward passes allocate many megabyte-sized temporaries. With
glibc defaults those come from fresh mmap regions, so every op pays page
faults; raising the mmap/trim thresholds keeps the buffers on the heap and
roughly quarters end-to-end latency. Best effort: silently does nothing on
non-glibc platforms.
"""

from __future__ import annotations

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    """Raise malloc's mmap/trim thresholds (idempotent). True on success."""
    global _done
    if _done:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok = bool(libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)) \
            and bool(libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30))
    except OSError:
        return False
    _done = ok
    return ok
