"""Synthetic monotone transduction task: token prototypes smeared over frame runs."""

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .serialization import read_container, write_container
from .views import FeatureSeq

DATASET_VERSION = 1


@dataclass
class TaskSpec:
    V: int = 16
    F: int = 12
    frames_per_token: tuple = (2, 4)
    noise_std: float = 1.0
    len_range: tuple = (3, 6)
    seed: int = 0

    def __post_init__(self):
        self.frames_per_token = tuple(int(v) for v in self.frames_per_token)
        self.len_range = tuple(int(v) for v in self.len_range)
        lo, hi = self.frames_per_token
        if self.V < 2:
            raise ValueError("need V >= 2")
        if not 1 <= lo <= hi:
            raise ValueError("frames_per_token must satisfy 1 <= min <= max")
        if not 1 <= self.len_range[0] <= self.len_range[1]:
            raise ValueError("len_range must satisfy 1 <= min <= max")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@lru_cache(maxsize=32)
def _prototypes(V, F, seed):
    rng = np.random.default_rng([seed, 0x5EED])
    protos = rng.normal(size=(V + 1, F))
    protos.setflags(write=False)
    return protos


def prototypes(spec):
    """Row k is the feature prototype of token k (row 0 unused)."""
    return _prototypes(spec.V, spec.F, spec.seed)


def generate_example(spec, rng, uid=""):
    """Draw (features, target).  Adjacent target tokens always differ, so run
    boundaries between tokens stay visible in the features."""
    U = int(rng.integers(spec.len_range[0], spec.len_range[1] + 1))
    tokens = np.empty(U, dtype=np.int64)
    tokens[0] = rng.integers(1, spec.V + 1)
    for i in range(1, U):
        step = rng.integers(1, spec.V)
        tokens[i] = (tokens[i - 1] - 1 + step) % spec.V + 1
    lo, hi = spec.frames_per_token
    runs = rng.integers(lo, hi + 1, size=U)
    protos = prototypes(spec)
    frames = np.repeat(protos[tokens], runs, axis=0)
    if spec.noise_std > 0:
        frames = frames + rng.normal(scale=spec.noise_std, size=frames.shape)
    return FeatureSeq(frames, uid), tokens


@dataclass
class Dataset:
    spec: TaskSpec
    train: list = field(default_factory=list)
    eval: list = field(default_factory=list)

    def save(self, path):
        meta = {
            "kind": "dataset",
            "version": DATASET_VERSION,
            "V": self.spec.V,
            "F": self.spec.F,
            "n_train": len(self.train),
            "n_eval": len(self.eval),
            "task": asdict(self.spec),
        }
        arrays = {}
        for split, items in (("train", self.train), ("eval", self.eval)):
            for i, (x, y) in enumerate(items):
                arrays[f"{split}/{i}/features"] = x.frames
                arrays[f"{split}/{i}/tokens"] = y
        write_container(path, meta, arrays)

    @classmethod
    def load(cls, path):
        meta, arrays = read_container(path)
        if meta.get("kind") != "dataset":
            raise ValueError(f"{path} is not a dataset file")
        if meta["version"] != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {meta['version']}")
        ds = cls(TaskSpec(**meta["task"]))
        for split in ("train", "eval"):
            items = getattr(ds, split)
            for i in range(meta[f"n_{split}"]):
                frames = arrays[f"{split}/{i}/features"]
                items.append((FeatureSeq(frames, f"{split}-{i}"), arrays[f"{split}/{i}/tokens"]))
        return ds


def generate_split(spec, n_train, n_eval, seed):
    """Train and eval draws come from independent child streams of ``seed``."""
    if n_train < 1 or n_eval < 1:
        raise ValueError("need at least one train and one eval example")
    train_ss, eval_ss = np.random.SeedSequence(seed).spawn(2)
    rt, re = np.random.default_rng(train_ss), np.random.default_rng(eval_ss)
    return Dataset(
        spec,
        [generate_example(spec, rt, f"train-{i}") for i in range(n_train)],
        [generate_example(spec, re, f"eval-{i}") for i in range(n_eval)],
    )
