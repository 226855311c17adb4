"""Input validation helpers shared across the package.

Small, fast checks in the spirit of scikit-learn's ``check_array``:
each helper either returns a canonicalized ``numpy`` array or raises a
package exception with a readable message.
"""

import numpy as np

from .errors import DataError


def check_points(points, name="points", min_rows=1):
    """Coerce to a finite float64 array of shape (n, 3).

    Parameters
    ----------
    points : array_like
        Candidate array of 3D points.
    name : str
        Name used in error messages.
    min_rows : int
        Minimum number of rows required.

    Returns
    -------
    np.ndarray
        Contiguous float64 array of shape (n, 3).
    """
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"{name} must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] < min_rows:
        raise DataError(f"{name} needs at least {min_rows} rows, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_vector3(v, name="vector"):
    """Coerce to a finite float64 vector of length 3."""
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise DataError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name):
    value = float(value)
    if not value > 0:
        raise DataError(f"{name} must be positive, got {value}")
    return value


def check_in_range(value, name, low, high, inclusive=True):
    value = float(value)
    ok = low <= value <= high if inclusive else low < value < high
    if not ok:
        raise DataError(f"{name}={value} outside allowed range [{low}, {high}]")
    return value


def check_same_length(a, b, name_a, name_b):
    if len(a) != len(b):
        raise DataError(
            f"{name_a} and {name_b} must have equal length ({len(a)} != {len(b)})"
        )
