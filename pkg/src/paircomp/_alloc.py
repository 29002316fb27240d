"""Keep glibc from returning large freed buffers to the kernel.

Training and sampling churn through tens-of-MB activation arrays; with
default malloc thresholds every such buffer is unmapped on free and
page-faulted back in on the next step, which dominates wall time on CPU.
Raising the mmap and trim thresholds lets the heap recycle those buffers.
No-op off glibc platforms.
"""

from __future__ import annotations

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_malloc(limit: int = 1 << 30) -> bool:
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, limit)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, limit)
        return bool(ok)
    except (OSError, AttributeError):
        return False
