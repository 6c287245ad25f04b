"""Greedy and beam-search decoding, token error rate, occupancy heatmaps.

Heatmap files:

* CSV ``t,u,value`` with value = alpha(t,u) beta(t,u) / Pr(y|x), the posterior
  probability that the alignment visits cell (t, u).  Every antidiagonal
  t + u = n sums to one, so values lie in [0, 1].
* Binary PGM (P5, maxval 255): width T, height U+1, top row is u = U.
  Pixel = round(255 * (1 - value)), i.e. darker means more mass.
* Path CSV ``step,t,u`` listing the Viterbi alignment cells in order.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lattice import lattice_tables, node_occupancy, viterbi_path

BLANK_PENALTY_RANGE = (-10.0, 10.0)


@dataclass
class BeamConfig:
    """``blank_penalty`` is subtracted from the blank log-probability before
    search; it is clamped to BLANK_PENALTY_RANGE so blanks stay reachable."""

    beam_size: int = 4
    blank_penalty: float = 0.0
    max_symbols_per_step: int = 5

    def __post_init__(self):
        if self.beam_size < 1 or self.max_symbols_per_step < 1:
            raise ValueError("beam_size and max_symbols_per_step must be >= 1")
        lo, hi = BLANK_PENALTY_RANGE
        self.blank_penalty = float(min(max(self.blank_penalty, lo), hi))


class _Predictor:
    """Memoized predictor states keyed by the context window of recent tokens."""

    def __init__(self, model):
        self.model, self.k, self.cache = model, model.dims.pred_context, {}

    def __call__(self, prefix):
        key = prefix[-self.k :]
        if key not in self.cache:
            self.cache[key] = self.model.predictor_output(key)
        return self.cache[key]


def _adjusted(lp, penalty):
    if penalty:
        lp = lp.copy()
        lp[..., 0] -= penalty
    return lp


def greedy_decode(model, features, blank_penalty=0.0, max_symbols_per_step=5, return_score=False):
    """Frame-synchronous argmax decoding."""
    cfg = BeamConfig(1, blank_penalty, max_symbols_per_step)
    enc = model.encoder_output(features)
    pred = _Predictor(model)
    prefix, score = (), 0.0
    for enc_t in enc:
        emitted = 0
        while True:
            lp = _adjusted(model.step_logprobs(enc_t, pred(prefix))[0], cfg.blank_penalty)
            if emitted == cfg.max_symbols_per_step:
                score += lp[0]
                break
            k = int(np.argmax(lp))
            score += lp[k]
            if k == 0:
                break
            prefix += (k,)
            emitted += 1
    tokens = np.array(prefix, dtype=np.int64)
    return (tokens, float(score)) if return_score else tokens


def _log_add(a, b):
    if a < b:
        a, b = b, a
    return a if b == -math.inf else a + math.log1p(math.exp(b - a))


def _top(pool, n):
    return dict(sorted(pool.items(), key=lambda kv: (-kv[1], kv[0]))[:n])


def _beam_search(model, enc, pred, cfg):
    beam = {(): 0.0}
    for enc_t in enc:
        done, live = {}, beam
        for emitted in range(cfg.max_symbols_per_step + 1):
            if not live:
                break
            prefixes = list(live)
            lp = model.step_logprobs(enc_t, np.stack([pred(p) for p in prefixes]))
            lp = _adjusted(lp, cfg.blank_penalty)
            grown = {}
            for prefix, row in zip(prefixes, lp):
                s = live[prefix]
                done[prefix] = _log_add(done.get(prefix, -math.inf), s + row[0])
                if emitted == cfg.max_symbols_per_step:
                    continue
                for k in np.argsort(-row[1:], kind="stable")[: cfg.beam_size] + 1:
                    key = prefix + (int(k),)
                    grown[key] = _log_add(grown.get(key, -math.inf), s + row[k])
            pool = {("done",) + p: v for p, v in done.items()}
            pool.update({("live",) + p: v for p, v in grown.items()})
            kept = _top(pool, cfg.beam_size)
            done = {k[1:]: v for k, v in kept.items() if k[0] == "done"}
            live = {k[1:]: v for k, v in kept.items() if k[0] == "live"}
        beam = done
    return min(beam.items(), key=lambda kv: (-kv[1], kv[0]))


def beam_decode(model, features, cfg=None, return_score=False):
    """Time-synchronous transducer beam search.

    Within a frame every live hypothesis either ends the frame with a blank or
    emits one more token (at most ``max_symbols_per_step``).  After each
    expansion round the finished and live hypotheses compete for ``beam_size``
    slots together.  Hypotheses with the same token sequence are merged by
    adding their probabilities.

    Pruning can make a wide beam lose to a narrow one, so the result is the
    best over widths 1..beam_size; the returned score never decreases with
    the width and width 1 is exactly greedy decoding.
    """
    cfg = cfg or BeamConfig()
    enc = model.encoder_output(features)
    pred = _Predictor(model)
    best = None
    for width in range(1, cfg.beam_size + 1):
        narrow = BeamConfig(width, cfg.blank_penalty, cfg.max_symbols_per_step)
        cand = _beam_search(model, enc, pred, narrow)
        if best is None or cand[1] > best[1]:
            best = cand
    tokens = np.array(best[0], dtype=np.int64)
    return (tokens, float(best[1])) if return_score else tokens


def edit_distance(hyp, ref):
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def token_error_rate(hyp, ref):
    """Edit distance over reference length; an empty reference scores len(hyp)."""
    d = edit_distance(hyp, ref)
    return float(d) / len(ref) if len(ref) else float(d)


@dataclass
class HeatmapDump:
    grid: np.ndarray
    viterbi_path: list = field(default_factory=list)

    def write(self, stem):
        stem = Path(stem)
        write_heatmap_csv(stem.with_suffix(".csv"), self.grid)
        write_pgm(stem.with_suffix(".pgm"), self.grid)
        write_path_csv(stem.with_name(stem.name + "_path.csv"), self.viterbi_path)


def occupancy_heatmap(lattice, target, mask=None):
    tables = lattice_tables(lattice, target, mask)
    if not np.isfinite(tables.log_prob_total):
        raise ValueError("lattice assigns zero probability to the target")
    grid = np.clip(node_occupancy(tables), 0.0, 1.0)
    path, _ = viterbi_path(lattice, target, mask)
    return HeatmapDump(grid, path)


def write_heatmap_csv(path, grid):
    lines = ["t,u,value"]
    for t in range(grid.shape[0]):
        for u in range(grid.shape[1]):
            lines.append(f"{t},{u},{float(grid[t, u])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_path_csv(path, cells):
    lines = ["step,t,u"] + [f"{i},{t},{u}" for i, (t, u) in enumerate(cells)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_pgm(path, grid):
    T, U1 = grid.shape
    pixels = np.round(255 * (1.0 - np.clip(grid, 0, 1))).astype(np.uint8)
    image = pixels.T[::-1]  # rows: u = U at the top
    with open(path, "wb") as fh:
        fh.write(f"P5\n{T} {U1}\n255\n".encode())
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def mass_near_path(grid, path, radius=3):
    """Fraction of total cell mass within Chebyshev distance ``radius`` of the path."""
    T, U1 = grid.shape
    near = np.zeros_like(grid, dtype=bool)
    for t, u in path:
        near[max(0, t - radius) : t + radius + 1, max(0, u - radius) : u + radius + 1] = True
    total = grid.sum()
    return float(grid[near].sum() / total) if total > 0 else 0.0


def path_agreement(path_a, path_b):
    """Fraction of antidiagonals on which the two alignments visit the same cell."""
    if len(path_a) != len(path_b):
        raise ValueError("paths cover different lattices")
    return sum(a == b for a, b in zip(path_a, path_b)) / len(path_a)


def path_chebyshev(path_a, path_b):
    """Largest Chebyshev distance between the two paths' cells on one antidiagonal."""
    return max(max(abs(a[0] - b[0]), abs(a[1] - b[1])) for a, b in zip(path_a, path_b))
