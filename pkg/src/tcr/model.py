"""A deliberately small transducer with explicit forward and backward passes.

encoder:   x[t-c .. t+c] (zero padded)  -> tanh dense -> dropout      (T, H)
predictor: embeddings of the last k tokens (bos = 0) -> tanh dense -> dropout  (U+1, H)
joiner:    tanh(enc W_e + pred W_p + b) -> dropout -> dense -> log-softmax  (T, U+1, V+1)
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_features, check_target
from .lattice import EmissionLattice
from .serialization import read_container, write_container

CHECKPOINT_VERSION = 1
DROPOUT_SITES = ("encoder", "predictor", "joiner")


@dataclass
class ModelDims:
    F: int
    V: int
    hidden: int = 32
    joiner: int = 32
    embed: int = 16
    context: int = 2
    pred_context: int = 2
    subsample: int = 1

    def __post_init__(self):
        if min(self.F, self.V, self.hidden, self.joiner, self.embed, self.pred_context, self.subsample) < 1:
            raise ValueError(f"invalid model dimensions {self}")
        if self.context < 0:
            raise ValueError("context must be >= 0")

    def shapes(self):
        d = self
        return {
            "enc_W": (d.F * (2 * d.context + 1), d.hidden),
            "enc_b": (d.hidden,),
            "emb": (d.V + 1, d.embed),
            "pred_W": (d.embed * d.pred_context, d.hidden),
            "pred_b": (d.hidden,),
            "join_We": (d.hidden, d.joiner),
            "join_Wp": (d.hidden, d.joiner),
            "join_b": (d.joiner,),
            "out_W": (d.joiner, d.V + 1),
            "out_b": (d.V + 1,),
        }


@dataclass
class DropoutPlan:
    rate: float = 0.0
    seed: int = 0
    sites: tuple = DROPOUT_SITES

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        unknown = set(self.sites) - set(DROPOUT_SITES)
        if unknown:
            raise ValueError(f"unknown dropout sites {sorted(unknown)}")

    def masks(self, shapes):
        """Inverted-dropout masks for each site, drawn in a fixed order."""
        if self.rate == 0.0:
            return {site: None for site in DROPOUT_SITES}
        rng = np.random.default_rng(self.seed)
        keep = 1.0 - self.rate
        out = {}
        for site in DROPOUT_SITES:
            draw = rng.random(shapes[site])
            out[site] = (draw < keep) / keep if site in self.sites else None
        return out


@dataclass
class ForwardCache:
    xw: np.ndarray
    h_enc: np.ndarray
    enc: np.ndarray
    ctx: np.ndarray
    z: np.ndarray
    h_pred: np.ndarray
    pred: np.ndarray
    h_join: np.ndarray
    d_join: np.ndarray
    probs: np.ndarray
    masks: dict = field(default_factory=dict)


def _window(frames, context, subsample):
    T, F = frames.shape
    padded = np.pad(frames, ((context, context), (0, 0)))
    idx = np.arange(T)[:, None] + np.arange(2 * context + 1)[None, :]
    return padded[idx].reshape(T, -1)[::subsample]


def _contexts(target, k):
    """Row u lists the k most recent tokens before predictor state u (0 = bos)."""
    hist = np.concatenate([np.zeros(k, dtype=np.int64), target])
    U1 = len(target) + 1
    return np.stack([hist[u + k - 1 - np.arange(k)] for u in range(U1)])


def _apply(mask, x):
    return x if mask is None else x * mask


class TransducerModel:
    def __init__(self, dims, params=None, seed=0):
        self.dims = dims
        if params is None:
            params = self.init_params(dims, seed)
        shapes = dims.shapes()
        if set(params) != set(shapes) or any(params[k].shape != shapes[k] for k in shapes):
            raise ValueError("parameter shapes do not match the model dimensions")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @staticmethod
    def init_params(dims, seed=0):
        """Uniform in +-1/sqrt(fan_in); biases start at zero."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in dims.shapes().items():
            if len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0]) if name != "emb" else 1.0
                params[name] = rng.uniform(-bound, bound, size=shape)
        return params

    def encode(self, frames, masks=None):
        p, d = self.params, self.dims
        xw = _window(frames, d.context, d.subsample)
        h = np.tanh(xw @ p["enc_W"] + p["enc_b"])
        return xw, h, _apply(masks and masks["encoder"], h)

    def predict_states(self, ctx, masks=None):
        p = self.params
        z = p["emb"][ctx].reshape(len(ctx), -1)
        h = np.tanh(z @ p["pred_W"] + p["pred_b"])
        return z, h, _apply(masks and masks["predictor"], h)

    def joint(self, enc, pred, mask=None):
        """Log-probabilities for every (enc row, pred row) pair: (T, U+1, V+1)."""
        p = self.params
        a = enc @ p["join_We"]
        b = pred @ p["join_Wp"] + p["join_b"]
        h = np.tanh(a[:, None, :] + b[None, :, :])
        d = _apply(mask, h)
        logits = d @ p["out_W"] + p["out_b"]
        logits -= logits.max(axis=-1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        return h, d, logp

    def forward(self, features, target, dropout=None):
        """Return (EmissionLattice, ForwardCache)."""
        frames = getattr(features, "frames", features)
        frames = check_features(frames, self.dims.F)
        target = check_target(target, V=self.dims.V)
        d = self.dims
        T = len(range(0, frames.shape[0], d.subsample))
        U1 = len(target) + 1
        shapes = {"encoder": (T, d.hidden), "predictor": (U1, d.hidden), "joiner": (T, U1, d.joiner)}
        masks = (dropout or DropoutPlan()).masks(shapes)
        xw, h_enc, enc = self.encode(frames, masks)
        ctx = _contexts(target, d.pred_context)
        z, h_pred, pred = self.predict_states(ctx, masks)
        h_join, d_join, logp = self.joint(enc, pred, masks["joiner"])
        cache = ForwardCache(xw, h_enc, enc, ctx, z, h_pred, pred, h_join, d_join, np.exp(logp), masks)
        return EmissionLattice(logp, validate=False), cache

    def backward(self, cache, lattice_grad, enc_grad=None):
        """Parameter gradients of a scalar whose d/d(logp) is ``lattice_grad``.

        ``enc_grad`` adds a gradient arriving directly at the encoder output.
        """
        if cache is None:
            raise ValueError("backward needs the cache returned by forward")
        p, c = self.params, cache
        g = np.asarray(lattice_grad, dtype=np.float64)
        if g.shape != c.probs.shape:
            raise ValueError(f"lattice gradient shape {g.shape} != {c.probs.shape}")
        J, V1 = p["out_W"].shape
        g_logits = g - c.probs * g.sum(axis=-1, keepdims=True)
        grads = {
            "out_W": c.d_join.reshape(-1, J).T @ g_logits.reshape(-1, V1),
            "out_b": g_logits.sum(axis=(0, 1)),
        }
        g_pre = _apply(c.masks.get("joiner"), g_logits @ p["out_W"].T) * (1.0 - c.h_join**2)
        grads["join_b"] = g_pre.sum(axis=(0, 1))
        g_a, g_b = g_pre.sum(axis=1), g_pre.sum(axis=0)
        grads["join_We"] = c.enc.T @ g_a
        grads["join_Wp"] = c.pred.T @ g_b

        g_enc = g_a @ p["join_We"].T
        if enc_grad is not None:
            g_enc = g_enc + enc_grad
        g_he = _apply(c.masks.get("encoder"), g_enc) * (1.0 - c.h_enc**2)
        grads["enc_W"] = c.xw.T @ g_he
        grads["enc_b"] = g_he.sum(axis=0)

        g_hp = _apply(c.masks.get("predictor"), g_b @ p["join_Wp"].T) * (1.0 - c.h_pred**2)
        grads["pred_W"] = c.z.T @ g_hp
        grads["pred_b"] = g_hp.sum(axis=0)
        g_z = (g_hp @ p["pred_W"].T).reshape(c.ctx.shape + (-1,))
        g_emb = np.zeros_like(p["emb"])
        np.add.at(g_emb, c.ctx, g_z)
        grads["emb"] = g_emb
        return grads

    # incremental pieces for decoding (no dropout)

    def encoder_output(self, features):
        frames = check_features(getattr(features, "frames", features), self.dims.F)
        return self.encode(frames)[2]

    def predictor_output(self, history):
        """Predictor state after the token history ``history`` (most recent last)."""
        k = self.dims.pred_context
        recent = list(history)[-k:][::-1]
        ctx = np.array([recent + [0] * (k - len(recent))], dtype=np.int64)
        return self.predict_states(ctx)[2][0]

    def step_logprobs(self, enc_t, pred_rows):
        """Joiner log-probs for one frame against several predictor states: (n, V+1)."""
        return self.joint(enc_t[None, :], np.atleast_2d(pred_rows))[2][0]

    def copy(self):
        return TransducerModel(self.dims, {k: v.copy() for k, v in self.params.items()})


def encoder_mse(enc_a, enc_b, with_grad=False):
    """Mean squared difference of two encoder outputs."""
    enc_a, enc_b = np.asarray(enc_a, dtype=np.float64), np.asarray(enc_b, dtype=np.float64)
    if enc_a.shape != enc_b.shape:
        raise ValueError(f"encoder outputs differ in shape: {enc_a.shape} vs {enc_b.shape}")
    diff = enc_a - enc_b
    value = float(np.mean(diff**2))
    if not with_grad:
        return value
    g = 2.0 * diff / diff.size
    return value, g, -g


@dataclass
class NoamSchedule:
    """Linear warmup to ``peak_lr`` then inverse-square-root decay."""

    peak_lr: float = 3e-3
    warmup: int = 200

    def __call__(self, step):
        step = max(int(step), 1)
        return self.peak_lr * min(step / self.warmup, (self.warmup / step) ** 0.5)


class AdamW:
    """Adam with decoupled weight decay and optional global-norm clipping."""

    def __init__(self, schedule=None, betas=(0.9, 0.98), eps=1e-9, weight_decay=1e-3, max_grad_norm=None):
        self.schedule = schedule or NoamSchedule()
        self.betas, self.eps = betas, eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.m, self.v = {}, {}

    def step(self, params, grads):
        """Update ``params`` in place; returns (params, pre-clip gradient norm)."""
        norm = float(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / norm
        self.step_count += 1
        lr = self.schedule(self.step_count)
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.step_count, 1 - b2**self.step_count
        for name in sorted(params):
            g = grads[name] * scale
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= lr * self.weight_decay * params[name]
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params, norm

    def state_arrays(self):
        out = {f"opt/m/{k}": v for k, v in self.m.items()}
        out.update({f"opt/v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays, step_count):
        self.step_count = int(step_count)
        self.m = {k[len("opt/m/") :]: v.copy() for k, v in arrays.items() if k.startswith("opt/m/")}
        self.v = {k[len("opt/v/") :]: v.copy() for k, v in arrays.items() if k.startswith("opt/v/")}


def save_checkpoint(path, model, optimizer=None, extra=None):
    meta = {
        "kind": "checkpoint",
        "version": CHECKPOINT_VERSION,
        "dims": asdict(model.dims),
        "step": optimizer.step_count if optimizer else 0,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in sorted(model.params.items())}
    if optimizer is not None:
        arrays.update(sorted(optimizer.state_arrays().items()))
    write_container(path, meta, arrays)


def load_checkpoint(path, optimizer=None):
    """Return (model, meta); optimizer state is restored into ``optimizer`` if given."""
    meta, arrays = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a checkpoint")
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']}")
    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    model = TransducerModel(ModelDims(**meta["dims"]), params)
    if optimizer is not None:
        optimizer.load_state_arrays(arrays, meta["step"])
    return model, meta
