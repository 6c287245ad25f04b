"""Two stochastic views per utterance: spec-augment masking plus dropout seeds."""

import dataclasses
from dataclasses import dataclass

import numpy as np

from ._validation import check_features

# 27 of 80 mel bins; the mean of a uniform width draw is half of that
PAPER_FREQ_WIDTH_FRAC = 27 / 80


@dataclass
class FeatureSeq:
    frames: np.ndarray
    meta: str = ""

    def __post_init__(self):
        self.frames = check_features(self.frames)

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class AugmentSpec:
    """Masking policy.

    Time masks draw a width uniformly in ``[0, floor(time_mask_frac * T)]``;
    frequency masks are exactly ``freq_mask_width`` bins wide.
    """

    n_time_masks: int = 2
    time_mask_frac: float = 0.1
    n_freq_masks: int = 2
    freq_mask_width: int = 2
    seed: int = 0
    fill: str = "mean"

    def __post_init__(self):
        if min(self.n_time_masks, self.n_freq_masks, self.freq_mask_width) < 0 or self.time_mask_frac < 0:
            raise ValueError("mask counts and widths must be nonnegative")
        if self.fill not in ("mean", "zero"):
            raise ValueError("fill must be 'mean' or 'zero'")

    @property
    def enabled(self):
        return self.n_time_masks > 0 or (self.n_freq_masks > 0 and self.freq_mask_width > 0)

    @classmethod
    def scaled_to(cls, n_features, **kw):
        """Keep the relative severity of an 80-bin setup on ``n_features`` bins."""
        width = max(1, round(0.5 * PAPER_FREQ_WIDTH_FRAC * n_features))
        return cls(freq_mask_width=width, **kw)


@dataclass
class ViewPair:
    view_a: FeatureSeq
    view_b: FeatureSeq
    dropout_seed_a: int
    dropout_seed_b: int


def spec_augment(x, spec):
    """Return a masked copy of ``x``; unmasked entries are untouched."""
    frames = x.frames if isinstance(x, FeatureSeq) else check_features(x)
    T, F = frames.shape
    rng = np.random.default_rng(spec.seed)
    fill = frames.mean() if spec.fill == "mean" else 0.0
    out = frames.copy()

    masked = np.zeros(T, dtype=bool)
    max_w = min(int(spec.time_mask_frac * T), T)
    for _ in range(spec.n_time_masks):
        w = int(rng.integers(0, max_w + 1))
        start = int(rng.integers(0, T - w + 1))
        trial = masked.copy()
        trial[start : start + w] = True
        if trial.all():
            continue
        masked = trial
    out[masked] = fill

    w = min(spec.freq_mask_width, F)
    for _ in range(spec.n_freq_masks):
        start = int(rng.integers(0, F - w + 1))
        out[:, start : start + w] = fill
    meta = x.meta if isinstance(x, FeatureSeq) else ""
    return FeatureSeq(out, meta)


def distinct_seeds(rng, n=2):
    seeds = []
    while len(seeds) < n:
        s = int(rng.integers(0, 2**63 - 1))
        if s not in seeds:
            seeds.append(s)
    return seeds


def make_view_pair(x, spec, rng):
    aug_a, aug_b, drop_a, drop_b = distinct_seeds(rng, 4)
    if not isinstance(x, FeatureSeq):
        x = FeatureSeq(x)
    return ViewPair(
        spec_augment(x, dataclasses.replace(spec, seed=aug_a)),
        spec_augment(x, dataclasses.replace(spec, seed=aug_b)),
        drop_a,
        drop_b,
    )
