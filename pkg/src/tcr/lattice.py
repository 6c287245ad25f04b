"""Forward-backward dynamic programming over the transducer output lattice.

Indices are 0-based throughout: cell ``(t, u)`` with ``0 <= t < T`` and
``0 <= u <= U`` holds the joiner distribution after consuming frame ``t`` and
emitting ``u`` target tokens.  Vocabulary index 0 is the blank.  A blank at
``(t, u)`` moves to ``(t + 1, u)``; emitting ``target[u]`` moves to
``(t, u + 1)``.  Every alignment starts in ``(0, 0)`` and ends with the blank
out of ``(T - 1, U)``.

All tables are kept in the log domain with ``-inf`` for impossible states.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_log_probs, check_target

NEG_INF = float("-inf")


def log_add(a, b):
    """log(exp(a) + exp(b)) on Python floats, exact for -inf operands."""
    if a < b:
        a, b = b, a
    if b == NEG_INF:
        return a
    return a + math.log1p(math.exp(b - a))


@dataclass
class EmissionLattice:
    """Per-cell log-probability distributions of shape (T, U+1, V+1)."""

    logp: np.ndarray
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        if self.validate:
            self.logp = check_log_probs(self.logp)
        else:
            self.logp = np.ascontiguousarray(self.logp, dtype=np.float64)

    @classmethod
    def from_probs(cls, probs):
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=np.float64)))

    @property
    def T(self):
        return self.logp.shape[0]

    @property
    def U(self):
        return self.logp.shape[1] - 1

    @property
    def V(self):
        return self.logp.shape[2] - 1

    @property
    def blank(self):
        return self.logp[:, :, 0]

    def emit(self, target):
        """Log-probabilities of the next target token, shape (T, U)."""
        target = check_target(target, self.U, self.V)
        return self.logp[:, np.arange(self.U), target]

    def fingerprint(self):
        return hashlib.blake2b(self.logp.tobytes(), digest_size=16).hexdigest()


@dataclass
class LatticeTables:
    log_alpha: np.ndarray
    log_beta: np.ndarray
    log_prob_total: float


@dataclass
class OccupancyMaps:
    """Transition occupancies, each group normalized to sum to one.

    ``w_nonblank[t, u]`` weighs the emission of ``target[u]`` at ``(t, u)``;
    ``w_blank[t, u]`` weighs the blank out of ``(t, u)``.  ``norm_*`` hold the
    group sums before normalization (expected counts U and T when Z = Pr).
    """

    w_nonblank: np.ndarray
    w_blank: np.ndarray
    norm_nonblank: float
    norm_blank: float
    source: str = ""


def _check_pair(lattice, target):
    if not isinstance(lattice, EmissionLattice):
        lattice = EmissionLattice(lattice)
    return lattice, check_target(target, lattice.U, lattice.V)


def _allowed(mask, T, U):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (T, U + 1):
        raise ValueError(f"band mask shape {mask.shape} != {(T, U + 1)}")
    return mask.tolist()


def forward_pass(lattice, target, mask=None):
    """Log forward table; ``mask`` optionally restricts the DP to a set of cells."""
    lattice, target = _check_pair(lattice, target)
    T, U = lattice.T, lattice.U
    blank = lattice.blank.tolist()
    emit = lattice.emit(target).tolist()
    ok = _allowed(mask, T, U)
    alpha = [[NEG_INF] * (U + 1) for _ in range(T)]
    for t in range(T):
        row, prev = alpha[t], alpha[t - 1] if t else None
        for u in range(U + 1):
            if ok is not None and not ok[t][u]:
                continue
            if t == 0 and u == 0:
                row[u] = 0.0
                continue
            v = prev[u] + blank[t - 1][u] if t else NEG_INF
            if u:
                v = log_add(v, row[u - 1] + emit[t][u - 1])
            row[u] = v
    return np.array(alpha)


def backward_pass(lattice, target, mask=None):
    lattice, target = _check_pair(lattice, target)
    T, U = lattice.T, lattice.U
    blank = lattice.blank.tolist()
    emit = lattice.emit(target).tolist()
    ok = _allowed(mask, T, U)
    beta = [[NEG_INF] * (U + 1) for _ in range(T)]
    for t in range(T - 1, -1, -1):
        row, nxt = beta[t], beta[t + 1] if t < T - 1 else None
        for u in range(U, -1, -1):
            if ok is not None and not ok[t][u]:
                continue
            if t == T - 1 and u == U:
                row[u] = blank[t][u]
                continue
            v = nxt[u] + blank[t][u] if nxt is not None else NEG_INF
            if u < U:
                v = log_add(v, row[u + 1] + emit[t][u])
            row[u] = v
    return np.array(beta)


def lattice_tables(lattice, target, mask=None):
    lattice, target = _check_pair(lattice, target)
    alpha = forward_pass(lattice, target, mask)
    beta = backward_pass(lattice, target, mask)
    total = alpha[-1, -1] + lattice.logp[-1, -1, 0]
    return LatticeTables(alpha, beta, float(total))


def transducer_loss(lattice, target, mask=None):
    """-ln Pr(target | lattice); +inf when no alignment survives."""
    lattice, target = _check_pair(lattice, target)
    alpha = forward_pass(lattice, target, mask)
    return float(-(alpha[-1, -1] + lattice.logp[-1, -1, 0]))


def _next_blank_beta(log_beta):
    # beta one frame ahead; past the last frame only the final blank of (T-1, U) survives
    nxt = np.full_like(log_beta, NEG_INF)
    nxt[:-1] = log_beta[1:]
    nxt[-1, -1] = 0.0
    return nxt


def _raw_occupancies(lattice, target, tables):
    lp_total = tables.log_prob_total
    if not np.isfinite(lp_total):
        raise ValueError("lattice assigns zero probability to the target")
    a, b = tables.log_alpha, tables.log_beta
    with np.errstate(invalid="ignore"):
        nonblank = np.exp(a[:, :-1] + b[:, 1:] + lattice.emit(target) - lp_total)
        blank = np.exp(a + _next_blank_beta(b) + lattice.blank - lp_total)
    return np.nan_to_num(nonblank, nan=0.0), np.nan_to_num(blank, nan=0.0)


def loss_grad(lattice, target, tables=None, mask=None):
    """Gradient of -ln Pr(y|x) w.r.t. every entry of ``lattice.logp``.

    Entries are treated as independent coordinates; the gradient of a used
    transition is minus its posterior occupancy, all other entries are 0.
    """
    lattice, target = _check_pair(lattice, target)
    if tables is None:
        tables = lattice_tables(lattice, target, mask)
    nonblank, blank = _raw_occupancies(lattice, target, tables)
    grad = np.zeros_like(lattice.logp)
    grad[:, :, 0] = -blank
    U = lattice.U
    if U:
        t_idx = np.arange(lattice.T)[:, None]
        u_idx = np.arange(U)[None, :]
        grad[t_idx, u_idx, target[None, :]] -= nonblank
    return grad


def occupancies(lattice, target, tables=None, mask=None):
    """Group-normalized blank / non-blank transition occupancies."""
    lattice, target = _check_pair(lattice, target)
    if tables is None:
        tables = lattice_tables(lattice, target, mask)
    if tables.log_alpha.shape != lattice.blank.shape:
        raise ValueError("tables do not belong to this lattice")
    nonblank, blank = _raw_occupancies(lattice, target, tables)
    zn, zb = float(nonblank.sum()), float(blank.sum())
    return OccupancyMaps(
        w_nonblank=nonblank / zn if zn > 0 else nonblank,
        w_blank=blank / zb,
        norm_nonblank=zn,
        norm_blank=zb,
        source=lattice.fingerprint(),
    )


def node_occupancy(tables):
    """Per-cell posterior alpha*beta/Pr; every antidiagonal sums to one."""
    with np.errstate(invalid="ignore"):
        grid = np.exp(tables.log_alpha + tables.log_beta - tables.log_prob_total)
    return np.nan_to_num(grid, nan=0.0)


def antidiagonal_check(tables):
    """Largest |log sum_{t+u=n} alpha*beta - ln Pr| over the antidiagonals."""
    if not np.isfinite(tables.log_prob_total):
        raise ValueError("zero total probability")
    T, U1 = tables.log_alpha.shape
    ab = tables.log_alpha + tables.log_beta
    worst = 0.0
    for n in range(T + U1 - 1):
        t = np.arange(max(0, n - U1 + 1), min(T, n + 1))
        vals = ab[t, n - t]
        m = vals.max()
        if m == NEG_INF:
            return math.inf
        s = m + math.log(np.exp(vals - m).sum())
        worst = max(worst, abs(s - tables.log_prob_total))
    return worst


def viterbi_path(lattice, target, mask=None):
    """Most probable alignment as the list of T+U visited cells, and its log score.

    Ties prefer the blank (advance in time) at the earliest decision.
    """
    lattice, target = _check_pair(lattice, target)
    T, U = lattice.T, lattice.U
    blank = lattice.blank.tolist()
    emit = lattice.emit(target).tolist()
    ok = _allowed(mask, T, U)
    best = [[NEG_INF] * (U + 1) for _ in range(T)]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if ok is not None and not ok[t][u]:
                continue
            if t == T - 1 and u == U:
                best[t][u] = blank[t][u]
                continue
            v = best[t + 1][u] + blank[t][u] if t < T - 1 else NEG_INF
            if u < U:
                v = max(v, best[t][u + 1] + emit[t][u])
            best[t][u] = v
    if best[0][0] == NEG_INF:
        raise ValueError("no alignment with nonzero probability")
    path, t, u = [(0, 0)], 0, 0
    while (t, u) != (T - 1, U):
        via_blank = best[t + 1][u] + blank[t][u] if t < T - 1 else NEG_INF
        via_emit = best[t][u + 1] + emit[t][u] if u < U else NEG_INF
        if via_blank >= via_emit:
            t += 1
        else:
            u += 1
        path.append((t, u))
    return path, best[0][0]
