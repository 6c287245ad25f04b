"""scikit-learn style wrapper around the training loop."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_sequences
from .config import ExperimentConfig
from .decode import BeamConfig, beam_decode, edit_distance, greedy_decode
from .training import fit_model
from .views import FeatureSeq


class TCRTransducer(BaseEstimator):
    """Transducer trained on two views per utterance with a consistency term.

    ``X`` is a list of (T_i, F) feature arrays and ``y`` a list of token arrays
    with values in 1..n_tokens.  ``lam=0`` gives the duplicated-view baseline.
    """

    def __init__(
        self,
        n_tokens=None,
        hidden=32,
        joiner=32,
        embed=16,
        context=2,
        dropout=0.1,
        lam=0.1,
        clamp=5e-3,
        variant="tcr",
        kl_mode="token_bernoulli",
        region="band",
        U_r=5,
        augment=True,
        epochs=10,
        batch_size=8,
        peak_lr=3e-3,
        warmup=200,
        beam_size=1,
        random_state=0,
    ):
        self.n_tokens = n_tokens
        self.hidden = hidden
        self.joiner = joiner
        self.embed = embed
        self.context = context
        self.dropout = dropout
        self.lam = lam
        self.clamp = clamp
        self.variant = variant
        self.kl_mode = kl_mode
        self.region = region
        self.U_r = U_r
        self.augment = augment
        self.epochs = epochs
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.warmup = warmup
        self.beam_size = beam_size
        self.random_state = random_state

    def _config(self, n_features, n_tokens):
        over = {
            "task.F": n_features,
            "task.V": n_tokens,
            "model.hidden": self.hidden,
            "model.joiner": self.joiner,
            "model.embed": self.embed,
            "model.context": self.context,
            "model.dropout": float(self.dropout),
            "tcr.lam": float(self.lam),
            "tcr.clamp": float(self.clamp),
            "tcr.variant": self.variant,
            "tcr.kl_mode": self.kl_mode,
            "tcr.region": self.region,
            "prune.U_r": self.U_r,
            "train.epochs": self.epochs,
            "train.batch_size": self.batch_size,
            "optim.peak_lr": float(self.peak_lr),
            "optim.warmup": self.warmup,
            "eval.beam_size": self.beam_size,
            "run.seed": self.random_state,
        }
        if not self.augment:
            over.update({"augment.n_time_masks": 0, "augment.n_freq_masks": 0})
        return ExperimentConfig().with_overrides(over)

    def fit(self, X, y):
        X, y = check_sequences(X, y)
        n_tokens = self.n_tokens or int(max((t.max() for t in y if t.size), default=1))
        if any(t.size and t.max() > n_tokens for t in y):
            raise ValueError(f"targets contain tokens above n_tokens={n_tokens}")
        self.config_ = self._config(X[0].shape[1], max(n_tokens, 2))
        items = [(FeatureSeq(x, f"train-{i}"), t) for i, (x, t) in enumerate(zip(X, y))]
        self.model_, _, self.history_ = fit_model(self.config_, items)
        self.n_features_in_ = X[0].shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_sequences(X, n_features=self.n_features_in_)
        if self.beam_size == 1:
            return [greedy_decode(self.model_, x) for x in X]
        cfg = BeamConfig(self.beam_size)
        return [beam_decode(self.model_, x, cfg) for x in X]

    def transform(self, X):
        """Encoder outputs, one (T_i, hidden) array per sequence."""
        check_is_fitted(self, "model_")
        X = check_sequences(X, n_features=self.n_features_in_)
        return [self.model_.encoder_output(x) for x in X]

    def score(self, X, y):
        """1 - corpus token error rate."""
        X, y = check_sequences(X, y, n_features=getattr(self, "n_features_in_", None))
        hyps = self.predict(X)
        edits = sum(edit_distance(h, t) for h, t in zip(hyps, y))
        return 1.0 - edits / max(sum(len(t) for t in y), 1)

    def predict_log_lattice(self, x, target):
        """Emission log-probabilities (T, U+1, V+1) of one utterance, no dropout."""
        check_is_fitted(self, "model_")
        lattice, _ = self.model_.forward(np.asarray(x, dtype=np.float64), target)
        return lattice.logp
