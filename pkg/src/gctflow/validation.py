"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .errors import InputError, ShapeError


def check_windows(X, y=None, *, n_segments: int | None = None, t_in: int | None = None,
                  t_out: int | None = None):
    """Validate sample windows ``X [B, 3, N, t_in]`` and targets ``y [B, N, t_out]``.

    Returns float64 arrays.  Non-finite values raise :class:`InputError`.
    """
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64, ensure_all_finite=False,
                    input_name="X")
    if X.ndim != 4 or X.shape[1] != 3:
        raise ShapeError(f"X must be [B, 3, N, t_in], got {X.shape}")
    if n_segments is not None and X.shape[2] != n_segments:
        raise ShapeError(f"X has {X.shape[2]} segments, expected {n_segments}")
    if t_in is not None and X.shape[3] != t_in:
        raise ShapeError(f"X has {X.shape[3]} input steps, expected {t_in}")
    if not np.isfinite(X).all():
        raise InputError("X contains NaN or infinity")
    if y is None:
        return X
    y = check_array(y, ensure_2d=False, allow_nd=True, dtype=np.float64, ensure_all_finite=False,
                    input_name="y")
    if y.ndim != 3 or y.shape[:2] != (X.shape[0], X.shape[2]):
        raise ShapeError(f"y must be [B, N, t_out] matching X {X.shape}, got {y.shape}")
    if t_out is not None and y.shape[2] != t_out:
        raise ShapeError(f"y has {y.shape[2]} steps, expected {t_out}")
    if not np.isfinite(y).all():
        raise InputError("y contains NaN or infinity")
    return X, y


def check_slots(slots, n_samples: int, t_out: int) -> np.ndarray:
    slots = np.asarray(slots)
    if slots.shape != (n_samples, t_out) or not np.issubdtype(slots.dtype, np.integer):
        raise ShapeError(f"slots must be an integer array [{n_samples}, {t_out}], got {slots.shape}")
    return slots
