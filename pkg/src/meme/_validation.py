"""Input validation for the estimator front-end.

Missing modalities are encoded as all-NaN rows, which keeps both views as
plain 2-D arrays that ``sklearn`` utilities understand.
"""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataError, ShapeError
from .objective import BOTH, S_ONLY, T_ONLY


def missing_rows(X):
    """Boolean vector marking rows that are entirely NaN."""
    X = np.asarray(X, dtype=float)
    flat = X.reshape(len(X), -1)
    nan = np.isnan(flat)
    partial = nan.any(axis=1) & ~nan.all(axis=1)
    if partial.any():
        raise DataError(f"rows {np.flatnonzero(partial)[:5].tolist()} are partially NaN; "
                        "mark a missing modality with an all-NaN row")
    return nan.all(axis=1)


def check_view(X, name, allow_missing=True, dtype=np.float64):
    """Validate one modality matrix; NaN rows allowed when ``allow_missing``."""
    X = check_array(X, dtype=dtype, ensure_all_finite="allow-nan" if allow_missing else True,
                    ensure_2d=True, allow_nd=False)
    if not allow_missing and np.isnan(X).any():
        raise DataError(f"{name}: NaN values are not allowed here")
    if np.isinf(X).any():
        raise DataError(f"{name}: infinite values")
    return X


def check_views(S, T):
    """Validate a pair of views and derive the observation mask.

    Returns ``(S, T, mask)`` with NaN rows replaced by zeros.
    """
    S = check_view(S, "S")
    T = check_view(T, "T")
    if S.shape[0] != T.shape[0]:
        raise ShapeError(f"S has {S.shape[0]} rows but T has {T.shape[0]}")
    ms, mt = missing_rows(S), missing_rows(T)
    if np.any(ms & mt):
        raise DataError(f"rows {np.flatnonzero(ms & mt)[:5].tolist()} observe neither modality")
    mask = np.full(len(S), BOTH, dtype=np.int64)
    mask[mt] = S_ONLY
    mask[ms] = T_ONLY
    return np.nan_to_num(S, nan=0.0), np.nan_to_num(T, nan=0.0), mask


def check_n_features(X, expected, name):
    if X.shape[1] != expected:
        raise ShapeError(f"{name} has {X.shape[1]} features, estimator was fitted with {expected}")
