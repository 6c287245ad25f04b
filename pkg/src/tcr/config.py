"""Experiment configuration.

File format: one ``section.key = value`` per line, ``#`` starts a comment,
blank lines are ignored.  Every key has a default; unknown keys are errors.
Values are parsed according to the type of the default: ints, floats,
``true``/``false``, strings, and comma-separated pairs for tuple fields.

The resolved configuration (all keys, defaults filled in) is written to every
run directory.  Its hash covers every key except ``run.out_dir``.
"""

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .consistency import TcrConfig
from .decode import BeamConfig
from .model import DROPOUT_SITES, AdamW, ModelDims, NoamSchedule
from .synthdata import TaskSpec
from .views import AugmentSpec

# streams spawned from the master seed, in this order
SEED_STREAMS = ("data", "model", "views", "shuffle")
UNHASHED_KEYS = ("run.out_dir",)


class ConfigError(ValueError):
    pass


@dataclass
class TaskSection:
    V: int = 16
    F: int = 12
    frames_per_token: tuple = (2, 4)
    noise_std: float = 1.0
    len_range: tuple = (3, 6)
    prototype_seed: int = 0
    n_train: int = 200
    n_eval: int = 50
    data_path: str = ""


@dataclass
class ModelSection:
    hidden: int = 32
    joiner: int = 32
    embed: int = 16
    context: int = 2
    pred_context: int = 2
    subsample: int = 1
    dropout: float = 0.1
    dropout_sites: str = "encoder,predictor,joiner"


@dataclass
class OptimSection:
    peak_lr: float = 3e-3
    warmup: int = 200
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    max_grad_norm: float = 5.0  # 0 disables clipping


@dataclass
class TcrSection:
    lam: float = 0.1
    beta_nonblank: float = 1.0
    beta_blank: float = 1.0
    clamp: float = 5e-3
    variant: str = "tcr"
    kl_mode: str = "token_bernoulli"
    topk_blank: int = 2
    topk_nonblank: int = 2
    region: str = "band"  # band | full
    duplicate_views: bool = True


@dataclass
class AugmentSection:
    n_time_masks: int = 2
    time_mask_frac: float = 0.1
    n_freq_masks: int = 2
    freq_mask_width: int = 2
    fill: str = "mean"


@dataclass
class PruneSection:
    U_r: int = 5


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 8


@dataclass
class EvalSection:
    beam_size: int = 4
    blank_penalty: float = 0.0
    max_symbols_per_step: int = 5
    seed: int = 1234


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    tcr: TcrSection = field(default_factory=TcrSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    prune: PruneSection = field(default_factory=PruneSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        self.validate()

    # builders for the domain objects

    def task_spec(self):
        t = self.task
        return TaskSpec(t.V, t.F, t.frames_per_token, t.noise_std, t.len_range, t.prototype_seed)

    def model_dims(self):
        m = self.model
        return ModelDims(
            self.task.F, self.task.V, m.hidden, m.joiner, m.embed, m.context, m.pred_context, m.subsample
        )

    def dropout_sites(self):
        return tuple(s.strip() for s in self.model.dropout_sites.split(",") if s.strip())

    def tcr_config(self):
        c = self.tcr
        return TcrConfig(
            c.lam, c.beta_nonblank, c.beta_blank, c.clamp, c.variant, c.kl_mode, c.topk_blank, c.topk_nonblank
        )

    def augment_spec(self):
        a = self.augment
        return AugmentSpec(a.n_time_masks, a.time_mask_frac, a.n_freq_masks, a.freq_mask_width, 0, a.fill)

    def beam_config(self):
        e = self.eval
        return BeamConfig(e.beam_size, e.blank_penalty, e.max_symbols_per_step)

    def optimizer(self):
        o = self.optim
        return AdamW(
            NoamSchedule(o.peak_lr, o.warmup),
            (o.beta1, o.beta2),
            o.eps,
            o.weight_decay,
            o.max_grad_norm or None,
        )

    def seeds(self):
        """Independent integer seeds for each stream in SEED_STREAMS."""
        children = np.random.SeedSequence(self.run.seed).spawn(len(SEED_STREAMS))
        return {name: int(ss.generate_state(1, np.uint64)[0]) for name, ss in zip(SEED_STREAMS, children)}

    def validate(self):
        try:
            self.task_spec()
            self.model_dims()
            self.tcr_config()
            self.augment_spec()
            self.beam_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(self.dropout_sites()) - set(DROPOUT_SITES)
        if unknown:
            raise ConfigError(f"unknown dropout sites {sorted(unknown)}")
        if not 0.0 <= self.model.dropout < 1.0:
            raise ConfigError("model.dropout must be in [0, 1)")
        if self.tcr.region not in ("band", "full"):
            raise ConfigError("tcr.region must be 'band' or 'full'")
        if not self.tcr.duplicate_views and self.tcr.lam > 0:
            raise ConfigError("a consistency term needs two views; set tcr.duplicate_views = true or tcr.lam = 0")
        if self.prune.U_r < 1:
            raise ConfigError("prune.U_r must be >= 1")
        if self.train.epochs < 0 or self.train.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.task.n_train < 1 or self.task.n_eval < 1:
            raise ConfigError("task.n_train and task.n_eval must be >= 1")
        o = self.optim
        if o.peak_lr <= 0 or o.warmup < 1 or o.max_grad_norm < 0 or o.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")

    # flat key/value view

    def items(self):
        for sec in fields(self):
            section = getattr(self, sec.name)
            for f in fields(section):
                yield f"{sec.name}.{f.name}", getattr(section, f.name)

    def to_dict(self):
        return dict(self.items())

    def dumps(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def dump(self, path):
        Path(path).write_text(self.dumps())

    def hash(self):
        canon = "".join(f"{k} = {_format(v)}\n" for k, v in self.items() if k not in UNHASHED_KEYS)
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, overrides):
        """Copy with ``{"section.key": value}`` applied; string values are parsed."""
        sections = {sec.name: dataclasses.asdict(getattr(self, sec.name)) for sec in fields(self)}
        for key, value in dict(overrides).items():
            sec, _, name = key.partition(".")
            if sec not in sections or name not in sections[sec]:
                raise ConfigError(f"unknown config key {key!r}")
            default = sections[sec][name]
            sections[sec][name] = _parse(value, default, key) if isinstance(value, str) else _coerce(value, default, key)
        types = {sec.name: sec.default_factory for sec in fields(self)}
        return ExperimentConfig(**{k: types[k](**v) for k, v in sections.items()})

    @classmethod
    def from_text(cls, text, overrides=None):
        pairs = parse_pairs(text)
        pairs.update(overrides or {})
        return cls().with_overrides(pairs)

    @classmethod
    def load(cls, path, overrides=None):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, overrides)


def parse_pairs(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_override(arg):
    key, sep, value = arg.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {arg!r} is not key=value")
    return key.strip(), value.strip()


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def _parse(text, default, key):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.strip("()[] ").split(",")]
            return tuple(type(d)(p) for d, p in zip(default, parts, strict=True))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} like {_format(default)!r}") from exc
    return text


def _coerce(value, default, key):
    if isinstance(default, tuple):
        value = tuple(value)
        if len(value) != len(default):
            raise ConfigError(f"{key}: expected {len(default)} values")
        return tuple(type(d)(v) for d, v in zip(default, value))
    if isinstance(default, bool):
        if not isinstance(value, (bool, np.bool_)):
            raise ConfigError(f"{key}: expected a boolean")
        return bool(value)
    if isinstance(default, (int, float)) and not isinstance(value, (int, float, np.integer, np.floating)):
        raise ConfigError(f"{key}: expected a number")
    if isinstance(default, int):
        if int(value) != value:
            raise ConfigError(f"{key}: expected an integer")
        return int(value)
    return type(default)(value)

