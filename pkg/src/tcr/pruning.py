"""Monotone pruning bands over the lattice.

A band keeps ``U_r`` consecutive target positions per frame,
``[lower[t], lower[t] + U_r)``.  Bands are chosen from exact posterior cell
mass and are nested: the band of width w+1 contains the band of width w, so
widening never removes an alignment.
"""

from dataclasses import dataclass

import numpy as np

from .lattice import EmissionLattice, lattice_tables, node_occupancy, transducer_loss


@dataclass
class PruneBand:
    U_r: int
    lower: np.ndarray
    U: int

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.int64)
        if self.U_r < 1 or self.U_r > self.U + 1:
            raise ValueError(f"band width {self.U_r} outside [1, {self.U + 1}]")
        if self.lower.min() < 0 or self.lower.max() > self.U + 1 - self.U_r:
            raise ValueError("band start out of range")
        if np.any(np.diff(self.lower) < 0):
            raise ValueError("band starts must be non-decreasing")
        if self.lower[0] != 0 or self.lower[-1] + self.U_r - 1 < self.U:
            raise ValueError("band must contain the first and last cells")

    @property
    def T(self):
        return len(self.lower)

    def mask(self):
        u = np.arange(self.U + 1)[None, :]
        lo = self.lower[:, None]
        return (u >= lo) & (u < lo + self.U_r)


def _best_starts(mass, w, allowed):
    """Non-decreasing starts maximizing covered mass, endpoints pinned."""
    T, U1 = mass.shape
    n = U1 - w + 1
    csum = np.concatenate([np.zeros((T, 1)), np.cumsum(mass, axis=1)], axis=1)
    cover = csum[:, w:] - csum[:, :n]
    allowed = allowed.copy()
    allowed[0, 1:] = False
    allowed[-1, :-1] = False
    score = np.where(allowed[0], cover[0], -np.inf)
    back = np.zeros((T, n), dtype=np.int64)
    for t in range(1, T):
        best_prev = np.maximum.accumulate(score)
        # first index attaining the running max
        is_new = np.concatenate([[True], score[1:] > best_prev[:-1]])
        arg_prev = np.maximum.accumulate(np.where(is_new, np.arange(n), 0))
        score = np.where(allowed[t], cover[t] + best_prev, -np.inf)
        back[t] = arg_prev
    lower = np.empty(T, dtype=np.int64)
    lower[-1] = n - 1
    for t in range(T - 1, 0, -1):
        lower[t - 1] = back[t, lower[t]]
    return lower


def select_band(tables, U_r=5):
    """Pick a band of width ``U_r`` concentrating the posterior mass of ``tables``."""
    if U_r < 1:
        raise ValueError("U_r must be >= 1")
    mass = node_occupancy(tables)
    T, U1 = mass.shape
    U_r = min(U_r, U1)
    if T == 1:
        # one frame must hold both endpoints
        return PruneBand(U1, np.zeros(1, dtype=np.int64), U1 - 1)
    lower = _best_starts(mass, 1, np.ones((T, U1), dtype=bool))
    for w in range(2, U_r + 1):
        n = U1 - w + 1
        allowed = np.zeros((T, n), dtype=bool)
        for t, prev in enumerate(lower):
            for cand in (prev - 1, prev):
                if 0 <= cand < n:
                    allowed[t, cand] = True
        lower = _best_starts(mass, w, allowed)
    return PruneBand(U_r, lower, U1 - 1)


def band_for(lattice, target, U_r=5):
    return select_band(lattice_tables(lattice, target), U_r)


def banded_loss(lattice, target, band):
    """Transducer loss with every out-of-band cell forced to zero probability.

    ``band`` is a PruneBand or an explicit (T, U+1) boolean cell mask.
    """
    if not isinstance(lattice, EmissionLattice):
        lattice = EmissionLattice(lattice)
    mask = band.mask() if isinstance(band, PruneBand) else np.asarray(band, dtype=bool)
    if mask.shape != (lattice.T, lattice.U + 1):
        raise ValueError(f"band shape {mask.shape} does not match lattice")
    if not (mask[0, 0] and mask[-1, -1]):
        raise ValueError("band must contain the first and last cells")
    return transducer_loss(lattice, target, mask=mask)
