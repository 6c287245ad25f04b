"""Training, evaluation and reporting.

Per utterance the objective is

    NLL(view a) + NLL(view b) + lam * (D(a|b) + D(b|a))

where each direction D is clamped on its own.  Every term is minimized.
With ``duplicate_views`` off (only allowed for lam = 0) a single view is
trained and the objective is its NLL alone.
"""

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .consistency import TcrConfig, symmetric_consistency, tcr_loss
from .decode import (
    beam_decode,
    edit_distance,
    greedy_decode,
    mass_near_path,
    occupancy_heatmap,
    path_agreement,
    path_chebyshev,
)
from .lattice import EmissionLattice, lattice_tables, loss_grad, occupancies
from .model import DropoutPlan, TransducerModel, encoder_mse, load_checkpoint, save_checkpoint
from .pruning import select_band
from .serialization import write_container, write_lattice_text
from .synthdata import Dataset, generate_split
from .views import make_view_pair

log = logging.getLogger(__name__)

BAND_VARIANTS = ("tcr", "full_joint", "compressed_prob")
COMPARE_VARIANTS = (
    "baseline",
    "tcr",
    "full_joint",
    "threshold_topk",
    "best_one_path",
    "compressed_prob",
    "encoder_mse",
)


class NumericFailure(RuntimeError):
    def __init__(self, message, bundle=None):
        super().__init__(message)
        self.bundle = bundle


class DataError(OSError):
    """Missing or incompatible dataset / checkpoint file."""


@dataclass
class PairTerms:
    nll_a: float
    nll_b: float
    d_c: float
    d_c_raw: float
    total: float
    grads: dict = field(default=None, repr=False)
    lattices: tuple = field(default=(), repr=False)
    frozen: dict = field(default=None, repr=False)


@dataclass
class RunReport:
    config_hash: str
    seed: int
    variant: str
    lam: float
    epochs: list
    eval: dict
    n_steps: int
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("wall_clock")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _dropout(cfg, seed):
    return DropoutPlan(cfg.model.dropout, seed, cfg.dropout_sites())


def _nll(lattice, target):
    tables = lattice_tables(lattice, target)
    return -tables.log_prob_total, tables


def _finite(*values):
    return all(math.isfinite(v) for v in values)


def pair_objective(model, pair, target, cfg, frozen=None, with_grad=True):
    """Loss terms (and parameter gradients) for one view pair.

    ``frozen`` carries the band and occupancy weights of a previous call;
    passing it holds those fixed, which is what the gradient ignores anyway.
    """
    tcr = cfg.tcr_config()
    lam = tcr.lam
    lat_a, cache_a = model.forward(pair.view_a, target, _dropout(cfg, pair.dropout_seed_a))
    nll_a, tab_a = _nll(lat_a, target)
    if not cfg.tcr.duplicate_views:
        terms = PairTerms(nll_a, 0.0, 0.0, 0.0, nll_a, lattices=(lat_a,))
        if with_grad and math.isfinite(nll_a):
            terms.grads = model.backward(cache_a, loss_grad(lat_a, target, tab_a))
        return terms

    lat_b, cache_b = model.forward(pair.view_b, target, _dropout(cfg, pair.dropout_seed_b))
    nll_b, tab_b = _nll(lat_b, target)
    terms = PairTerms(nll_a, nll_b, 0.0, 0.0, nll_a + nll_b, lattices=(lat_a, lat_b), frozen=frozen or {})
    if not _finite(nll_a, nll_b):
        return terms

    g_a = g_b = enc_g_a = enc_g_b = None
    if lam > 0 and tcr.variant == "encoder_mse":
        raw, ga, gb = encoder_mse(cache_a.enc, cache_b.enc, with_grad=True)
        # both directions of a symmetric distance, clamped like the lattice variants
        d_c, d_raw = 2 * min(raw, tcr.clamp), 2 * raw
        if raw <= tcr.clamp:
            enc_g_a, enc_g_b = 2 * lam * ga, 2 * lam * gb
    elif lam > 0:
        region = terms.frozen.get("region")
        if "region" not in terms.frozen:
            if cfg.tcr.region == "band" and tcr.variant in BAND_VARIANTS:
                region = select_band(tab_a, cfg.prune.U_r).mask() | select_band(tab_b, cfg.prune.U_r).mask()
            terms.frozen["region"] = region
        occ_a, occ_b = terms.frozen.get("occ_a"), terms.frozen.get("occ_b")
        if tcr.variant == "tcr" and occ_a is None:
            tab = (tab_a, tab_b) if region is None else (None, None)
            occ_a = occupancies(lat_a, target, tab[0], mask=region)
            occ_b = occupancies(lat_b, target, tab[1], mask=region)
            terms.frozen["occ_a"] = dataclasses.replace(occ_a, source="")
            terms.frozen["occ_b"] = dataclasses.replace(occ_b, source="")
        d_c, d_raw, ga, gb = symmetric_consistency(lat_a, lat_b, target, tcr, occ_a, occ_b, region)
        g_a, g_b = lam * ga, lam * gb
    else:
        d_c = d_raw = 0.0

    terms.d_c, terms.d_c_raw = d_c, d_raw
    terms.total = nll_a + nll_b + lam * d_c
    if with_grad:
        la = loss_grad(lat_a, target, tab_a)
        lb = loss_grad(lat_b, target, tab_b)
        if g_a is not None:
            la, lb = la + g_a, lb + g_b
        grads_a = model.backward(cache_a, la, enc_g_a)
        grads_b = model.backward(cache_b, lb, enc_g_b)
        terms.grads = {k: grads_a[k] + grads_b[k] for k in grads_a}
    return terms


def _write_diagnostics(out_dir, cfg, model, pair, target, terms, where):
    bundle = Path(out_dir) / "diagnostics"
    bundle.mkdir(parents=True, exist_ok=True)
    cfg.dump(bundle / "config.txt")
    save_checkpoint(bundle / "params.bin", model)
    arrays = {"target": np.asarray(target), "view_a": pair.view_a.frames, "view_b": pair.view_b.frames}
    write_container(bundle / "inputs.bin", {"kind": "diagnostic-inputs", **where}, arrays)
    for name, lat in zip("ab", terms.lattices):
        write_lattice_text(bundle / f"view_{name}.lat", lat.logp, target)
    info = dict(where)
    info.update(
        nll_a=repr(terms.nll_a),
        nll_b=repr(terms.nll_b),
        d_c=repr(terms.d_c),
        dropout_seeds=[pair.dropout_seed_a, pair.dropout_seed_b],
    )
    (bundle / "info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return bundle


def fit_model(cfg, train_items, model=None, out_dir=None, step_log=None):
    """Run the optimization loop; returns (model, optimizer, per-epoch summaries).

    ``step_log`` receives one dict per optimizer step.
    """
    seeds = cfg.seeds()
    if model is None:
        model = TransducerModel(cfg.model_dims(), seed=seeds["model"])
    opt = cfg.optimizer()
    aug = cfg.augment_spec()
    views_rng = np.random.default_rng(seeds["views"])
    shuffle_rng = np.random.default_rng(seeds["shuffle"])
    bs = cfg.train.batch_size
    epochs = []
    for epoch in range(1, cfg.train.epochs + 1):
        order = shuffle_rng.permutation(len(train_items))
        sums = dict.fromkeys(("nll_a", "nll_b", "d_c", "d_c_raw", "total"), 0.0)
        norms = []
        for start in range(0, len(order), bs):
            batch = order[start : start + bs]
            acc, step_sums = None, dict.fromkeys(sums, 0.0)
            for idx in batch:
                x, y = train_items[idx]
                pair = make_view_pair(x, aug, views_rng)
                terms = pair_objective(model, pair, y, cfg)
                where = {"epoch": epoch, "step": opt.step_count + 1, "utterance": x.meta}
                bad = terms.grads is None or not all(np.isfinite(g).all() for g in terms.grads.values())
                if bad or not _finite(terms.total, terms.d_c_raw):
                    bundle = None
                    if out_dir is not None:
                        bundle = _write_diagnostics(out_dir, cfg, model, pair, y, terms, where)
                    raise NumericFailure(f"non-finite loss at epoch {epoch}, utterance {x.meta!r}", bundle)
                for k in step_sums:
                    step_sums[k] += getattr(terms, k)
                if acc is None:
                    acc = {k: g.copy() for k, g in terms.grads.items()}
                else:
                    for k, g in terms.grads.items():
                        acc[k] += g
            n = len(batch)
            _, norm = opt.step(model.params, {k: g / n for k, g in acc.items()})
            norms.append(norm)
            for k in sums:
                sums[k] += step_sums[k]
            if step_log is not None:
                row = {"epoch": epoch, "step": opt.step_count, "lr": opt.schedule(opt.step_count)}
                row.update({k: v / n for k, v in step_sums.items()})
                row["grad_norm"] = norm
                step_log(row)
        summary = {"epoch": epoch, **{k: v / len(order) for k, v in sums.items()}}
        summary["grad_norm"] = float(np.mean(norms))
        epochs.append(summary)
        log.info("epoch %d: nll %.4f/%.4f d_c %.3g", epoch, summary["nll_a"], summary["nll_b"], summary["d_c"])
    return model, opt, epochs


def interview_divergence(model, x, target, cfg, rng):
    """Symmetric occupancy-weighted divergence between two fresh train-mode views
    (augmentation and dropout), over the full lattice and without the clamp."""
    pair = make_view_pair(x, cfg.augment_spec(), rng)
    lat_a, _ = model.forward(pair.view_a, target, _dropout(cfg, pair.dropout_seed_a))
    lat_b, _ = model.forward(pair.view_b, target, _dropout(cfg, pair.dropout_seed_b))
    probe = TcrConfig(clamp=math.inf, kl_mode=cfg.tcr.kl_mode)
    ab = tcr_loss(lat_a, lat_b, occupancies(lat_a, target), target, probe)
    ba = tcr_loss(lat_b, lat_a, occupancies(lat_b, target), target, probe)
    return ab.d_c_raw + ba.d_c_raw


def evaluate(model, items, cfg, beam=None):
    """Corpus TER (greedy and beam), mean inter-view divergence, per-utterance rows."""
    beam = beam or cfg.beam_config()
    rows, edits_g, edits_b, n_ref, divs = [], 0, 0, 0, []
    for i, (x, y) in enumerate(items):
        hyp_g = greedy_decode(model, x, beam.blank_penalty, beam.max_symbols_per_step)
        hyp_b = beam_decode(model, x, beam)
        eg, eb = edit_distance(hyp_g, y), edit_distance(hyp_b, y)
        div = interview_divergence(model, x, y, cfg, np.random.default_rng([cfg.eval.seed, i]))
        edits_g, edits_b, n_ref = edits_g + eg, edits_b + eb, n_ref + len(y)
        divs.append(div)
        rows.append(
            {
                "utterance": x.meta,
                "ref": " ".join(map(str, y)),
                "greedy": " ".join(map(str, hyp_g)),
                "beam": " ".join(map(str, hyp_b)),
                "edits_greedy": eg,
                "edits_beam": eb,
                "divergence": div,
            }
        )
    metrics = {
        "ter_greedy": float(edits_g / max(n_ref, 1)),
        "ter_beam": float(edits_b / max(n_ref, 1)),
        "divergence": float(np.mean(divs)),
        "n_utterances": len(items),
    }
    return metrics, rows


def _write_csv(path, rows, columns=None):
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})


def load_dataset(cfg):
    """The configured dataset: a file if ``task.data_path`` is set, else a fresh split."""
    if cfg.task.data_path:
        try:
            ds = Dataset.load(cfg.task.data_path)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot load dataset {cfg.task.data_path}: {exc}") from exc
        if (ds.spec.V, ds.spec.F) != (cfg.task.V, cfg.task.F):
            raise ConfigError(
                f"dataset has V={ds.spec.V}, F={ds.spec.F} but config says V={cfg.task.V}, F={cfg.task.F}"
            )
        return ds
    return generate_split(cfg.task_spec(), cfg.task.n_train, cfg.task.n_eval, cfg.seeds()["data"])


def train(cfg, dataset=None, model=None, write=True):
    """Train, evaluate and (optionally) write the run directory; returns (report, model)."""
    start = time.perf_counter()
    out = Path(cfg.run.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "config.txt")
    dataset = dataset or load_dataset(cfg)
    steps = []
    model, opt, epochs = fit_model(cfg, dataset.train, model, out if write else None, steps.append)
    metrics, rows = evaluate(model, dataset.eval, cfg)
    report = RunReport(
        cfg.hash(), cfg.run.seed, cfg.tcr.variant, cfg.tcr.lam, epochs, metrics, opt.step_count
    )
    report.wall_clock = time.perf_counter() - start
    if write:
        # the stored config omits the run directory so checkpoints depend only on hashed fields
        stored = cfg.with_overrides({"run.out_dir": ""}).dumps()
        save_checkpoint(out / "checkpoint.bin", model, opt, {"config": stored, "config_hash": cfg.hash()})
        (out / "report.json").write_text(report.to_json())
        _write_csv(out / "epochs.csv", epochs)
        _write_csv(out / "steps.csv", steps)
        _write_csv(out / "eval_utterances.csv", rows)
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": report.wall_clock}) + "\n")
    return report, model


def load_run_checkpoint(path):
    """Model plus the experiment config stored alongside it."""
    try:
        model, meta = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    text = meta.get("extra", {}).get("config")
    cfg = ExperimentConfig.from_text(text) if text else None
    return model, cfg


def variant_config(base, variant, seed, out_dir):
    if variant not in COMPARE_VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(COMPARE_VARIANTS)}")
    over = {"run.seed": seed, "run.out_dir": str(out_dir)}
    if variant == "baseline":
        over.update({"tcr.lam": 0.0, "tcr.variant": "tcr"})
    else:
        over["tcr.variant"] = variant
        if base.tcr.lam == 0:
            over["tcr.lam"] = 0.1
    return base.with_overrides(over)


def _mean_sd(values):
    values = np.asarray(values, dtype=np.float64)
    sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), sd


def compare_variants(base, variants, seeds, out_dir=None, dataset=None):
    """Train every (variant, seed) pair; returns one summary row per variant.

    ``seeds`` is a count (0..n-1) or an explicit list.  Per-job run directories
    go under ``out_dir/<variant>/seed<k>`` when ``out_dir`` is given.
    """
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    root = Path(out_dir) if out_dir else None
    table, runs = [], []
    for variant in variants:
        reports = []
        for seed in seeds:
            job_dir = (root / variant / f"seed{seed}") if root else Path(".")
            cfg = variant_config(base, variant, seed, job_dir)
            report, _ = train(cfg, dataset, write=root is not None)
            reports.append(report)
            runs.append({"variant": variant, "seed": seed, **report.eval})
        row = {"variant": variant, "n_seeds": len(seeds)}
        for key in ("ter_greedy", "ter_beam", "divergence"):
            row[f"{key}_mean"], row[f"{key}_sd"] = _mean_sd([r.eval[key] for r in reports])
        table.append(row)
    if root:
        root.mkdir(parents=True, exist_ok=True)
        _write_csv(root / "compare.csv", table)
        _write_csv(root / "compare_runs.csv", runs)
        (root / "compare.md").write_text(format_table(table))
    return table


def format_table(table):
    lines = [
        "| variant | TER greedy | TER beam | inter-view divergence |",
        "|---|---|---|---|",
    ]
    for r in table:
        lines.append(
            f"| {r['variant']} | {100 * r['ter_greedy_mean']:.2f} ± {100 * r['ter_greedy_sd']:.2f} "
            f"| {100 * r['ter_beam_mean']:.2f} ± {100 * r['ter_beam_sd']:.2f} "
            f"| {r['divergence_mean']:.4g} ± {r['divergence_sd']:.2g} |"
        )
    return "\n".join(lines) + "\n"


def find_example(dataset, example_id):
    """Look up ``train-<i>`` / ``eval-<i>`` (a bare integer means eval)."""
    split, _, idx = str(example_id).rpartition("-")
    split = split or "eval"
    items = getattr(dataset, split, None) if split in ("train", "eval") else None
    if items is None or not idx.isdigit() or int(idx) >= len(items):
        raise KeyError(f"no example {example_id!r}")
    return items[int(idx)]


def dump_lattice(model, cfg, x, target, view_seed, out_dir, U_r=None):
    """Write both views' lattices and heatmaps plus a JSON summary comparing them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pair = make_view_pair(x, cfg.augment_spec(), np.random.default_rng(view_seed))
    U_r = U_r or cfg.prune.U_r
    summary = {"utterance": x.meta, "view_seed": view_seed, "U": len(target), "views": {}}
    dumps, bands = [], []
    for name, view, seed in (("a", pair.view_a, pair.dropout_seed_a), ("b", pair.view_b, pair.dropout_seed_b)):
        lat, _ = model.forward(view, target, _dropout(cfg, seed))
        write_lattice_text(out / f"view_{name}.lat", lat.logp, target)
        tables = lattice_tables(lat, target)
        dump = occupancy_heatmap(lat, target)
        dump.write(out / f"view_{name}")
        dumps.append(dump)
        bands.append(select_band(tables, U_r).mask())
        summary["views"][name] = {
            "loss": -tables.log_prob_total,
            "mass_within_3_of_path": mass_near_path(dump.grid, dump.viterbi_path, 3),
        }
    union = (bands[0] | bands[1]).sum()
    summary["band_overlap"] = float((bands[0] & bands[1]).sum() / union)
    summary["path_agreement"] = path_agreement(dumps[0].viterbi_path, dumps[1].viterbi_path)
    summary["path_chebyshev"] = path_chebyshev(dumps[0].viterbi_path, dumps[1].viterbi_path)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
