"""Global switches for the tensor engine: default dtype, grad mode, determinism."""
from contextlib import contextmanager

import numpy as np

_state = {"dtype": np.float32, "grad_enabled": True, "deterministic": True}


def default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextmanager
def dtype_scope(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


def grad_enabled():
    return _state["grad_enabled"]


@contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def is_deterministic():
    return _state["deterministic"]


_limiter = {"obj": None}


def set_deterministic(flag=True):
    """Toggle deterministic mode; when on, BLAS is pinned to one thread."""
    _state["deterministic"] = bool(flag)
    if flag and _limiter["obj"] is None:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:  # pragma: no cover
            return
        _limiter["obj"] = threadpool_limits(limits=1, user_api="blas")
    elif not flag and _limiter["obj"] is not None:
        _limiter["obj"].restore_original_limits()
        _limiter["obj"] = None
