"""scikit-learn style wrapper: fit on (token ids, spectrogram) pairs, predict spectrograms."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_paired, check_token_ids, check_token_sequences
from .aligner import inferred_frame_count
from .checkpoint import load_checkpoint, save_checkpoint
from .data import pad_batch
from .model import ModelConfig, Trainer, config_from_store, control_durations, forward, infer
from .softdtw import soft_dtw


class DurationAlignedSynthesizer(BaseEstimator):
    """Non-autoregressive token-to-spectrogram model that learns its own alignment.

    ``X`` is a list of integer token-id sequences and ``y`` the matching list
    of (frames, features) targets; no per-token durations are needed.
    Constructor arguments mirror :class:`~duralign.model.ModelConfig` plus the
    step count.
    """

    def __init__(self, vocab_size=20, model_dim=32, feature_dim=8, latent_dim=4, decoder_blocks=6,
                 decoder_conv_width=3, duration_conv_width=3, gamma=0.05, warp=128.0, band_half_width=30,
                 cost_indexing="paper", lambda_dur=100.0, beta_start=100, beta_end=1000, warmup=400, lr_dim=32,
                 batch_size=8, train_length="target", seed=0, steps=2000, threads=1):
        self.vocab_size = vocab_size
        self.model_dim = model_dim
        self.feature_dim = feature_dim
        self.latent_dim = latent_dim
        self.decoder_blocks = decoder_blocks
        self.decoder_conv_width = decoder_conv_width
        self.duration_conv_width = duration_conv_width
        self.gamma = gamma
        self.warp = warp
        self.band_half_width = band_half_width
        self.cost_indexing = cost_indexing
        self.lambda_dur = lambda_dur
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.warmup = warmup
        self.lr_dim = lr_dim
        self.batch_size = batch_size
        self.train_length = train_length
        self.seed = seed
        self.steps = steps
        self.threads = threads

    def _config(self) -> ModelConfig:
        names = ModelConfig.field_names()
        return ModelConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y):
        cfg = self._config()
        seqs, specs = check_paired(X, y, cfg.vocab_size, cfg.feature_dim)
        specs = [s.astype(np.float32) for s in specs]
        trainer = Trainer(cfg, threads=self.threads)
        rng = np.random.default_rng(cfg.seed)
        order = np.array([], dtype=np.int64)
        for _ in range(self.steps):
            if order.size == 0:
                order = rng.permutation(len(seqs))
            take, order = order[:cfg.batch_size], order[cfg.batch_size:]
            trainer.train_step(pad_batch([seqs[i] for i in take], [specs[i] for i in take]))
        self.config_ = cfg
        self.store_ = trainer.store
        self.n_steps_ = trainer.step
        self.loss_history_ = [b.total for b in trainer.history]
        return self

    def predict(self, X, duration_scale: float = 1.0) -> list[np.ndarray]:
        """Final-block spectrogram per sequence, with durations optionally scaled globally."""
        check_is_fitted(self, "store_")
        out = []
        for ids in check_token_sequences(X, self.config_.vocab_size):
            ctrl = None if duration_scale == 1.0 else (lambda d: control_durations(d, [(0, d.size, duration_scale)]))
            out.append(infer(self.store_, self.config_, ids, ctrl).spectrogram)
        return out

    def predict_durations(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "store_")
        return [infer(self.store_, self.config_, ids).durations for ids in check_token_sequences(X, self.config_.vocab_size)]

    def transform(self, X) -> list[np.ndarray]:
        """Token-to-frame attention matrices (frames x tokens) at inference."""
        check_is_fitted(self, "store_")
        return [infer(self.store_, self.config_, ids).attention for ids in check_token_sequences(X, self.config_.vocab_size)]

    def frame_count(self, ids) -> int:
        check_is_fitted(self, "store_")
        return inferred_frame_count(infer(self.store_, self.config_, check_token_ids(ids, self.config_.vocab_size)).durations)

    def score(self, X, y) -> float:
        """Negative mean Soft-DTW per target frame (upsampled to the target length)."""
        check_is_fitted(self, "store_")
        seqs, specs = check_paired(X, y, self.config_.vocab_size, self.config_.feature_dim)
        total = 0.0
        for ids, target in zip(seqs, specs):
            res = forward(self.store_, self.config_, ids, mode="infer", frames=target.shape[0])
            total += soft_dtw(target, res.preds[-1].data, self.config_.softdtw)[0] / target.shape[0]
        return -total / len(seqs)

    def save(self, path) -> None:
        check_is_fitted(self, "store_")
        save_checkpoint(self.store_, self.n_steps_, path)

    @classmethod
    def load(cls, path, **params) -> "DurationAlignedSynthesizer":
        store, step = load_checkpoint(path)
        cfg = config_from_store(store, **{k: v for k, v in params.items() if k in ModelConfig.field_names()})
        est = cls(**{**{k: v for k, v in dataclasses.asdict(cfg).items()}, **params})
        est.config_, est.store_, est.n_steps_ = cfg, store, step
        est.loss_history_ = []
        return est
