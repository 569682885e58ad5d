"""Input validation helpers shared across the package."""

import numpy as np

STOCHASTIC_ATOL = 1e-12


class InvariantError(ValueError):
    """A model, policy or dataset violates one of its structural invariants."""


def as_float_array(x, name, ndim=None):
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise InvariantError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"{name} contains non-finite entries")
    return arr


def check_distribution(p, name="p", atol=STOCHASTIC_ATOL):
    """Return ``p`` as a 1-d float array after checking it lies on the simplex."""
    p = as_float_array(p, name, ndim=1)
    if p.size == 0:
        raise InvariantError(f"{name} is empty")
    if np.any(p < 0):
        raise InvariantError(f"{name} has negative entries")
    if abs(p.sum() - 1.0) > atol:
        raise InvariantError(f"{name} sums to {float(p.sum())!r}, not 1")
    return p


def check_stochastic_rows(arr, name, atol=STOCHASTIC_ATOL):
    """Check that the last axis of ``arr`` holds probability distributions.

    The error message names the first offending row by its leading indices.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"{name} contains non-finite entries")
    neg = np.argwhere(arr < 0)
    if neg.size:
        raise InvariantError(f"{name}{[int(i) for i in neg[0][:-1]]} has a negative entry")
    sums = arr.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > atol)
    if bad.size:
        idx = tuple(bad[0])
        raise InvariantError(f"{name}{[int(i) for i in idx]} sums to {float(sums[idx])!r}, not 1")
    return arr


def check_unit_interval(arr, name):
    arr = np.asarray(arr, dtype=np.float64)
    bad = np.argwhere((arr < 0) | (arr > 1) | ~np.isfinite(arr))
    if bad.size:
        idx = tuple(bad[0])
        raise InvariantError(f"{name}{[int(i) for i in idx]} = {float(arr[idx])!r} is outside [0, 1]")
    return arr


def check_index(value, size, name):
    value = int(value)
    if not 0 <= value < size:
        raise InvariantError(f"{name}={value} out of range [0, {size})")
    return value


def frozen(arr):
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr
