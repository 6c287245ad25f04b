"""Input validation helpers shared by the lattice, model and estimator code."""

import numpy as np

NORM_ATOL = 1e-9


def check_log_probs(logp, atol=NORM_ATOL):
    """Validate a (T, U+1, V+1) array of per-cell log-distributions.

    Returns the array as contiguous float64.
    """
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    if logp.ndim != 3:
        raise ValueError(f"expected a rank-3 lattice, got shape {logp.shape}")
    T, U1, V1 = logp.shape
    if T < 1 or U1 < 1 or V1 < 2:
        raise ValueError(f"lattice shape {logp.shape} needs T>=1, U>=0, V>=1")
    if np.isnan(logp).any() or (logp > 0).any():
        raise ValueError("lattice entries must be log-probabilities (<= 0, no NaN)")
    with np.errstate(divide="ignore"):
        m = logp.max(axis=-1, keepdims=True)
        cell = (m + np.log(np.exp(logp - m).sum(axis=-1, keepdims=True)))[..., 0]
    if not np.all(np.abs(cell) <= atol):
        worst = np.unravel_index(np.nanargmax(np.abs(cell)), cell.shape)
        raise ValueError(f"cell {worst} is not normalized (logsumexp={cell[worst]:.3g})")
    return logp


def check_target(target, U=None, V=None):
    """Return `target` as an int64 vector; tokens live in 1..V."""
    target = np.asarray(target)
    if target.ndim != 1:
        raise ValueError("target must be a 1-d token sequence")
    if target.size and not np.issubdtype(target.dtype, np.integer):
        if not np.all(target == np.round(target)):
            raise ValueError("target tokens must be integers")
    target = target.astype(np.int64)
    if U is not None and target.shape[0] != U:
        raise ValueError(f"target length {target.shape[0]} does not match lattice U={U}")
    if target.size and target.min() < 1:
        raise ValueError("target tokens must be >= 1 (0 is the blank)")
    if V is not None and target.size and target.max() > V:
        raise ValueError(f"target token {target.max()} exceeds vocabulary size {V}")
    return target


def check_features(frames, n_features=None):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise ValueError(f"features must be a non-empty (T, F) array, got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("features contain non-finite values")
    if n_features is not None and frames.shape[1] != n_features:
        raise ValueError(f"expected {n_features} feature bins, got {frames.shape[1]}")
    return frames


def check_same_shape(a, b, what="lattices"):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def check_sequences(X, y=None, n_features=None):
    """sklearn-style check for ragged sequence data: lists of (T_i, F) arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    X = [check_features(x, n_features) for x in X]
    if not X:
        raise ValueError("need at least one sequence")
    F = X[0].shape[1]
    if any(x.shape[1] != F for x in X):
        raise ValueError("all sequences must share the feature dimension")
    if y is None:
        return X
    y = [check_target(t) for t in y]
    if len(y) != len(X):
        raise ValueError(f"got {len(X)} feature sequences but {len(y)} targets")
    return X, y
