"""Consistency losses between the output lattices of two views of one utterance.

Every loss here is a function of the two ``logp`` arrays, with the entries
treated as independent coordinates, so the returned gradients chain directly
into a log-softmax backward pass.  Cell weights (occupancies, top-K
selections, Viterbi paths) are constants: no gradient flows through them.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_same_shape, check_target
from .lattice import EmissionLattice, OccupancyMaps, occupancies, viterbi_path

VARIANTS = ("tcr", "full_joint", "threshold_topk", "best_one_path", "compressed_prob")
KL_MODES = ("token_bernoulli", "full_vocab")


@dataclass
class TcrConfig:
    lam: float = 0.1
    beta_nonblank: float = 1.0
    beta_blank: float = 1.0
    clamp: float = 5e-3
    variant: str = "tcr"
    kl_mode: str = "token_bernoulli"
    topk_blank: int = 2
    topk_nonblank: int = 2

    def __post_init__(self):
        if not self.clamp > 0:
            raise ValueError("clamp must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.topk_blank < 1 or self.topk_nonblank < 1:
            raise ValueError("top-K counts must be >= 1")
        if self.variant not in VARIANTS + ("encoder_mse",):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"unknown kl_mode {self.kl_mode!r}")


@dataclass
class ConsistencyResult:
    d_c: float
    d_c_raw: float
    per_group: dict = field(default_factory=dict)
    cells_used: int = 0
    grad_i: np.ndarray = field(default=None, repr=False)
    grad_j: np.ndarray = field(default=None, repr=False)


def _logp(lat):
    return lat.logp if isinstance(lat, EmissionLattice) else EmissionLattice(lat).logp


def log1mexp(x):
    """log(1 - exp(x)) for x <= 0."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(x > -0.6931471805599453, np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def bernoulli_kl(a, b):
    """KL((p, 1-p) || (q, 1-q)) from log p = a, log q = b; returns (kl, d/da, d/db)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    p = np.exp(a)
    la, lb = log1mexp(a), log1mexp(b)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        hit = np.where(p > 0, p * (a - b), 0.0)
        miss = np.where(p < 1, (1 - p) * (la - lb), 0.0)
        da = np.where(p > 0, p * ((a - b) - np.where(p < 1, la - lb, 0.0)), 0.0)
        db = -p + np.where(p < 1, np.exp(la + b - lb), 0.0)
    return hit + miss, da, db


def categorical_kl(li, lj):
    """Per-cell KL(p_i || p_j) over the last axis; returns (kl, d/dli, d/dlj)."""
    p = np.exp(li)
    with np.errstate(invalid="ignore"):
        diff = np.where(p > 0, li - lj, 0.0)
    kl = (p * diff).sum(axis=-1)
    return kl, p * (diff + 1.0), -p


def _weighted(weights, kl):
    with np.errstate(invalid="ignore"):
        return float(np.where(weights > 0, weights * kl, 0.0).sum())


def _check_occupancy(occ, lat, U):
    if not isinstance(occ, OccupancyMaps):
        raise TypeError("expected OccupancyMaps")
    T = lat.shape[0]
    if occ.w_blank.shape != (T, U + 1) or occ.w_nonblank.shape != (T, U):
        raise ValueError("occupancy maps do not match the lattice shape")
    if occ.source and isinstance(lat, np.ndarray):
        if occ.source != EmissionLattice(lat, validate=False).fingerprint():
            raise ValueError("occupancy maps were computed from a different lattice")


def tcr_loss(lat_i, lat_j, occ_i, target, cfg, with_grad=False):
    """Occupancy-weighted divergence of view j from view i, clamped at cfg.clamp."""
    li, lj = _logp(lat_i), _logp(lat_j)
    check_same_shape(li, lj)
    T, U1, V1 = li.shape
    U = U1 - 1
    target = check_target(target, U, V1 - 1)
    _check_occupancy(occ_i, li, U)
    wn = cfg.beta_nonblank * occ_i.w_nonblank
    wb = cfg.beta_blank * occ_i.w_blank
    rows, cols = np.arange(T)[:, None], np.arange(U)[None, :]
    gi, gj = np.zeros_like(li), np.zeros_like(lj)

    if cfg.kl_mode == "token_bernoulli":
        kl_n, dn_i, dn_j = bernoulli_kl(li[rows, cols, target], lj[rows, cols, target])
        kl_b, db_i, db_j = bernoulli_kl(li[:, :, 0], lj[:, :, 0])
        nonblank, blank = _weighted(wn, kl_n), _weighted(wb, kl_b)
        if with_grad:
            gi[rows, cols, target] = np.where(wn > 0, wn * dn_i, 0.0)
            gj[rows, cols, target] = np.where(wn > 0, wn * dn_j, 0.0)
            gi[:, :, 0] += np.where(wb > 0, wb * db_i, 0.0)
            gj[:, :, 0] += np.where(wb > 0, wb * db_j, 0.0)
    else:
        kl, dki, dkj = categorical_kl(li, lj)
        nonblank, blank = _weighted(wn, kl[:, :U]), _weighted(wb, kl)
        if with_grad:
            w = wb.copy()
            w[:, :U] += wn
            gi = np.where(w[..., None] > 0, w[..., None] * dki, 0.0)
            gj = np.where(w[..., None] > 0, w[..., None] * dkj, 0.0)

    raw = nonblank + blank
    d_c = min(max(raw, 0.0), cfg.clamp)
    used = np.zeros((T, U1), dtype=bool)
    used[:, :U] |= wn > 0
    used |= wb > 0
    res = ConsistencyResult(d_c, raw, {"nonblank": nonblank, "blank": blank}, int(used.sum()))
    if with_grad:
        if raw > cfg.clamp:
            gi, gj = np.zeros_like(li), np.zeros_like(lj)
        res.grad_i, res.grad_j = gi, gj
    return res


def symmetric_tcr(lat_a, lat_b, target, cfg, occ_a=None, occ_b=None):
    """D_c(a|b) + D_c(b|a), each weighted by its own view's occupancies."""
    if occ_a is None:
        occ_a = occupancies(lat_a, target)
    if occ_b is None:
        occ_b = occupancies(lat_b, target)
    ab = tcr_loss(lat_a, lat_b, occ_a, target, cfg)
    ba = tcr_loss(lat_b, lat_a, occ_b, target, cfg)
    return ab.d_c + ba.d_c


def _mean_kl(li, lj, cells, with_grad):
    n = int(cells.sum())
    if n == 0:
        return 0.0, np.zeros_like(li), np.zeros_like(lj)
    kl, gi, gj = categorical_kl(li, lj)
    value = float(kl[cells].sum()) / n
    if not with_grad:
        return value, None, None
    w = cells[..., None] / n
    return value, gi * w, gj * w


def _region(region, shape):
    if region is None:
        return np.ones(shape, dtype=bool)
    region = np.asarray(region, dtype=bool)
    if region.shape != shape:
        raise ValueError(f"region shape {region.shape} != {shape}")
    return region


def full_joint_loss(lat_i, lat_j, region=None, with_grad=False):
    """Unweighted mean full-vocabulary KL over every cell of the region."""
    li, lj = _logp(lat_i), _logp(lat_j)
    check_same_shape(li, lj)
    value, gi, gj = _mean_kl(li, lj, _region(region, li.shape[:2]), with_grad)
    return (value, gi, gj) if with_grad else value


def select_topk_cells(lat, target, k_blank, k_nonblank):
    """Per-frame top-K cells by next-token and by blank probability.

    Returns boolean masks (nonblank_sel, blank_sel), both shaped (T, U+1).
    Ties keep the lower u.
    """
    lp = _logp(lat)
    T, U1, V1 = lp.shape
    U = U1 - 1
    target = check_target(target, U, V1 - 1)
    nonblank = np.zeros((T, U1), dtype=bool)
    blank = np.zeros((T, U1), dtype=bool)
    rows = np.arange(T)[:, None]
    if U:
        emit = lp[:, np.arange(U), target]
        k = min(k_nonblank, U)
        nonblank[rows, np.argsort(-emit, axis=1, kind="stable")[:, :k]] = True
    k = min(k_blank, U1)
    blank[rows, np.argsort(-lp[:, :, 0], axis=1, kind="stable")[:, :k]] = True
    return nonblank, blank


def threshold_topk_loss(lat_i, lat_j, target, k_blank, k_nonblank, with_grad=False):
    li, lj = _logp(lat_i), _logp(lat_j)
    check_same_shape(li, lj)
    nonblank, blank = select_topk_cells(li, target, k_blank, k_nonblank)
    value, gi, gj = _mean_kl(li, lj, nonblank | blank, with_grad)
    return (value, gi, gj) if with_grad else value


def best_one_path_loss(lat_i, lat_j, target, with_grad=False):
    """Mean KL along the Viterbi alignment of view i."""
    li, lj = _logp(lat_i), _logp(lat_j)
    check_same_shape(li, lj)
    path, _ = viterbi_path(EmissionLattice(li, validate=False), target)
    cells = np.zeros(li.shape[:2], dtype=bool)
    cells[tuple(np.array(path).T)] = True
    value, gi, gj = _mean_kl(li, lj, cells, with_grad)
    return (value, gi, gj) if with_grad else value


def _masked_lse(lp, mask):
    x = np.where(mask, lp, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(x - m_safe).sum(axis=-1)) + m_safe[..., 0]
    return out


def compress(lat, target):
    """Collapse each cell to log-probs of (next target token, blank, everything else).

    The top row has no next token; its first class carries zero mass.
    Returns (compressed (T, U+1, 3), others mask (T, U+1, V+1)).
    """
    lp = _logp(lat)
    T, U1, V1 = lp.shape
    U = U1 - 1
    target = check_target(target, U, V1 - 1)
    others = np.ones(lp.shape, dtype=bool)
    others[:, :, 0] = False
    tok = np.full((T, U1), -np.inf)
    if U:
        rows, cols = np.arange(T)[:, None], np.arange(U)[None, :]
        others[rows, cols, target] = False
        tok[:, :U] = lp[rows, cols, target]
    out = np.stack([tok, lp[:, :, 0], _masked_lse(lp, others)], axis=-1)
    return out, others


def _expand_compressed_grad(g3, lp, others, target):
    T, U1, _ = lp.shape
    U = U1 - 1
    g = np.zeros_like(lp)
    g[:, :, 0] = g3[:, :, 1]
    if U:
        rows, cols = np.arange(T)[:, None], np.arange(U)[None, :]
        g[rows, cols, target] += g3[:, :U, 0]
    # cells with no "other" class give -inf - -inf; their share is 0
    with np.errstate(invalid="ignore"):
        share = np.exp(np.where(others, lp, -np.inf) - _masked_lse(lp, others)[..., None])
    share = np.nan_to_num(share, nan=0.0)
    return g + share * g3[:, :, 2:3]


def compressed_prob_loss(lat_i, lat_j, target, region=None, with_grad=False):
    """Mean three-class KL over the region."""
    li, lj = _logp(lat_i), _logp(lat_j)
    check_same_shape(li, lj)
    target = check_target(target, li.shape[1] - 1, li.shape[2] - 1)
    ci, others = compress(li, target)
    cj, _ = compress(lj, target)
    value, g3i, g3j = _mean_kl(ci, cj, _region(region, li.shape[:2]), with_grad)
    if not with_grad:
        return value
    return (
        value,
        _expand_compressed_grad(g3i, li, others, target),
        _expand_compressed_grad(g3j, lj, others, target),
    )


def directional_consistency(lat_i, lat_j, target, cfg, occ_i=None, region=None):
    """One direction D(i|j) of the configured lattice variant, with gradients.

    The clamp applies to every variant; above it both gradients are zero.
    """
    li, lj = _logp(lat_i), _logp(lat_j)
    if cfg.variant == "tcr":
        if occ_i is None:
            occ_i = occupancies(EmissionLattice(li, validate=False), target, mask=region)
        return tcr_loss(li, lj, occ_i, target, cfg, with_grad=True)
    if cfg.variant == "full_joint":
        raw, gi, gj = full_joint_loss(li, lj, region, with_grad=True)
    elif cfg.variant == "threshold_topk":
        raw, gi, gj = threshold_topk_loss(
            li, lj, target, cfg.topk_blank, cfg.topk_nonblank, with_grad=True
        )
    elif cfg.variant == "best_one_path":
        raw, gi, gj = best_one_path_loss(li, lj, target, with_grad=True)
    elif cfg.variant == "compressed_prob":
        raw, gi, gj = compressed_prob_loss(li, lj, target, region, with_grad=True)
    else:
        raise ValueError(f"{cfg.variant!r} is not a lattice consistency variant")
    if raw > cfg.clamp:
        gi, gj = np.zeros_like(li), np.zeros_like(lj)
    return ConsistencyResult(min(max(raw, 0.0), cfg.clamp), raw, grad_i=gi, grad_j=gj)


def symmetric_consistency(lat_a, lat_b, target, cfg, occ_a=None, occ_b=None, region=None):
    """D(a|b) + D(b|a) for the configured variant.

    Returns (value, raw value, grad wrt lat_a, grad wrt lat_b).
    """
    ab = directional_consistency(lat_a, lat_b, target, cfg, occ_a, region)
    ba = directional_consistency(lat_b, lat_a, target, cfg, occ_b, region)
    return (
        ab.d_c + ba.d_c,
        ab.d_c_raw + ba.d_c_raw,
        ab.grad_i + ba.grad_j,
        ab.grad_j + ba.grad_i,
    )
