"""Process-level runtime tweaks."""

import ctypes

_done = False


def enable_arena_reuse():
    """Keep large allocations inside the glibc arena so the big per-step
    buffers (im2col patches, activation gradients) are recycled instead of
    being mmap'd and faulted in fresh every step (~20% step time). Values
    are unaffected; safe to call on any platform (no-op if unavailable)."""
    global _done
    if _done:
        return
    _done = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)   # M_MMAP_THRESHOLD
    except Exception:
        pass
