"""Dense float64 arrays with the grouped views and norms the training recipes need.

Tensors are plain numpy arrays frozen read-only: every operation allocates a
fresh result and never mutates its inputs, so values can be shared freely.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError

_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}
_UNARY = {"square", "abs", "log", "exp"}


def tensor(data, shape=None) -> np.ndarray:
    """Build a read-only float64 tensor from nested sequences or an array."""
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"shape {shape} does not fit {arr.size} values")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor values must be finite")
    arr.setflags(write=False)
    return arr


def elementwise(op: str, a, b=None, c: float | None = None) -> np.ndarray:
    """Apply a coordinate-wise operation, returning a freshly allocated tensor.

    Binary ops (add, sub, mul) require equal shapes.  ``scale`` takes the
    factor ``c``.  ``log`` requires strictly positive inputs.
    """
    a = np.asarray(a, dtype=np.float64)
    if op in _BINARY:
        if b is None:
            raise DomainError(f"{op!r} needs a second operand")
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
        out = _BINARY[op](a, b)
    elif op == "scale":
        if c is None:
            raise DomainError("scale needs the factor c")
        out = a * float(c)
    elif op in _UNARY:
        if b is not None:
            raise DomainError(f"{op!r} is unary")
        if op == "log":
            if not np.all(a > 0.0):
                raise DomainError("log requires strictly positive inputs")
            out = np.log(a)
        elif op == "exp":
            with np.errstate(over="ignore"):  # the finiteness check below rejects inf
                out = np.exp(a)
        elif op == "square":
            out = np.square(a)
        else:
            out = np.abs(a)
    else:
        raise DomainError(f"unknown elementwise op {op!r}")
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{op!r} produced non-finite values")
    out.setflags(write=False)
    return out


def norm(a, kind: str) -> float:
    """l1, l2 or linf norm over all coordinates."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise DomainError("norm of an empty tensor is undefined")
    if kind == "l1":
        return float(np.sum(np.abs(a)))
    if kind == "l2":
        return float(np.sqrt(np.sum(np.square(a))))
    if kind == "linf":
        return float(np.max(np.abs(a)))
    raise DomainError(f"unknown norm kind {kind!r}")


def group_chunks(a, m: int) -> np.ndarray:
    """View a tensor as consecutive m-element groups along the innermost axis.

    Returns a read-only (n_groups, m) view; iterating yields the groups in
    row-major order, and concatenating them reproduces the flat data.  An
    innermost extent that is not divisible by m is a hard error: silent
    padding would change the sparsity semantics downstream.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    m = int(m)
    if m < 1:
        raise DimensionError("group size m must be positive")
    if a.ndim == 0 or a.shape[-1] % m != 0:
        extent = a.shape[-1] if a.ndim else 0
        raise DimensionError(f"innermost extent {extent} not divisible by m={m}")
    view = a.reshape(-1, m)
    view.setflags(write=False)
    return view
