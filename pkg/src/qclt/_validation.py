"""Input validation helpers shared by the public functions and estimators."""

import numbers

import numpy as np
from sklearn.utils import check_array

ROW_SUM_TOL = 1e-12


def check_row_stochastic(mat, name, axis=-1, tol=ROW_SUM_TOL):
    """Validate nonnegativity and unit row sums along ``axis``.

    Returns the array as float64. Raises ``ValueError`` naming the first
    offending row index.
    """
    arr = np.asarray(mat, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    neg = np.argwhere(arr < 0)
    if neg.size:
        raise ValueError(f"{name} has a negative entry at index {tuple(neg[0])}")
    sums = arr.sum(axis=axis)
    bad = np.argwhere(np.abs(sums - 1.0) > tol)
    if bad.size:
        idx = tuple(bad[0])
        raise ValueError(
            f"{name} row {idx} sums to {sums[idx]!r}, expected 1 within {tol:g}")
    return arr


def check_q_table(q, n_states=None, n_actions=None):
    q = check_array(q, ensure_2d=True, dtype=np.float64,
                    ensure_all_finite=True)
    if n_states is not None and q.shape != (n_states, n_actions):
        raise ValueError(
            f"Q table has shape {q.shape}, expected ({n_states}, {n_actions})")
    return q


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer; got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}; got {value}")
    return int(value)


def check_zeta_grid(zeta_grid):
    grid = np.asarray(zeta_grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise ValueError("zeta grid is empty")
    if np.any(grid < 0) or np.any(grid > 1):
        raise ValueError("zeta grid entries must lie in [0, 1]")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("zeta grid must be strictly ascending")
    return grid


def check_unit_directions(directions, dim, tol=1e-10):
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if dirs.shape[1] != dim:
        raise ValueError(f"directions have dimension {dirs.shape[1]}, expected {dim}")
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError("directions must be unit vectors")
    return dirs
