"""BLAS thread capping (``PROTEUS_THREADS`` and the determinism flag)."""
import os

from threadpoolctl import threadpool_limits

_limiter = None


def thread_cap():
    """Thread count to enforce, or None to leave the BLAS default alone."""
    from .tensor import is_deterministic

    if is_deterministic():
        return 1
    env = os.environ.get("PROTEUS_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"PROTEUS_THREADS must be >= 1, got {env!r}")
        return n
    return None


def apply_thread_limit():
    global _limiter
    if _limiter is not None:
        _limiter.restore_original_limits()
        _limiter = None
    cap = thread_cap()
    if cap is not None:
        _limiter = threadpool_limits(limits=cap, user_api="blas")
