"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_seed(random_state):
    """Integer seed for the counter-based streams; ``None`` means 0."""
    if random_state is None:
        return 0
    if isinstance(random_state, numbers.Integral) and not isinstance(random_state, bool):
        if random_state < 0:
            raise ValueError("random_state must be >= 0")
        return int(random_state)
    raise TypeError("random_state must be a non-negative int or None "
                    "(per-chain streams are keyed by integer seeds)")


def check_complete(X, n_features=None):
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X


def check_incomplete(X, n_features=None):
    """Float matrix where NaN marks a missing cell; infinities are rejected."""
    X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X


def check_positive(name, value, allow_zero=False):
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise TypeError(f"{name} must be a number")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'>= 0' if allow_zero else '> 0'}")
    return value


def check_choice(name, value, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value
