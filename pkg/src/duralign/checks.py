"""Self-checks: Soft-DTW against its oracles, and finite-difference gradient checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .aligner import UpsamplerParams, align, init_upsampler, TokenSequence
from .autodiff import ParameterStore, check_gradients, relative_error
from .model import ModelConfig, init_params, utterance_loss
from .softdtw import (SoftDtwConfig, hard_dtw_oracle, path_enumeration_oracle, soft_dtw, soft_dtw_grad)

ORACLE_TOL = 1e-10
HARD_TOL = 1e-2
BAND_TOL = 1e-12
GRAD_TOL = 1e-4
MODEL_GRAD_TOL = 1e-3


@dataclass
class DtwCheckResult:
    trials: int = 0
    oracle_err: float = 0.0
    hard_err: float = 0.0
    band_err: float = 0.0
    grad_err: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        return (f"trials={self.trials} oracle_max_abs_err={self.oracle_err:.3e} (tol {ORACLE_TOL:g}) "
                f"hard_max_abs_err={self.hard_err:.3e} (tol {HARD_TOL:g}) "
                f"band_max_abs_err={self.band_err:.3e} (tol {BAND_TOL:g}) "
                f"grad_max_rel_err={self.grad_err:.3e} (tol {GRAD_TOL:g})")


def fd_grad_wrt_prediction(x, y, cfg: SoftDtwConfig, step: float = 1e-6) -> np.ndarray:
    out = np.zeros_like(y)
    for idx in np.ndindex(*y.shape):
        up, down = y.copy(), y.copy()
        up[idx] += step
        down[idx] -= step
        out[idx] = (soft_dtw(x, up, cfg)[0] - soft_dtw(x, down, cfg)[0]) / (2 * step)
    return out


def run_dtw_checks(trials: int = 100, max_len: int = 6, max_features: int = 3, seed: int = 0, gamma: float = 0.05,
                   warp: float = 128.0, cost_indexing: str = "paper", corrupt_warp: float = 0.0) -> DtwCheckResult:
    """Random pairs against the path-enumeration and hard-DTW oracles, band consistency and FD gradients.

    ``corrupt_warp`` biases the horizontal-branch warp of the checked DP only,
    so a working harness must report failures.
    """
    rng = np.random.default_rng(seed)
    res = DtwCheckResult()
    for n in range(trials):
        tx, ty = (int(v) for v in rng.integers(1, max_len + 1, size=2))
        f = int(rng.integers(1, max_features + 1))
        x = rng.normal(size=(tx, f))
        y = rng.normal(size=(ty, f))
        full = SoftDtwConfig(gamma, warp, max(tx, ty), cost_indexing)

        value = soft_dtw(x, y, full, _horizontal_warp_bias=corrupt_warp)[0]
        err = abs(value - path_enumeration_oracle(x, y, gamma, warp, cost_indexing))
        res.oracle_err = max(res.oracle_err, err)
        if not err <= ORACLE_TOL:
            res.failures.append(f"trial {n}: oracle mismatch {err:.3e} ({tx}x{ty})")

        sharp = SoftDtwConfig(1e-4, warp, max(tx, ty), cost_indexing)
        err = abs(soft_dtw(x, y, sharp, _horizontal_warp_bias=corrupt_warp)[0]
                  - hard_dtw_oracle(x, y, warp, cost_indexing))
        res.hard_err = max(res.hard_err, err)
        if not err <= HARD_TOL:
            res.failures.append(f"trial {n}: hard-DTW mismatch {err:.3e}")

        wide = SoftDtwConfig(gamma, warp, 10 * max(tx, ty) + 7, cost_indexing)
        err = abs(value - soft_dtw(x, y, wide)[0])
        res.band_err = max(res.band_err, err)
        if not err <= BAND_TOL:
            res.failures.append(f"trial {n}: band inconsistency {err:.3e}")

        analytic = soft_dtw_grad(x, y, full)
        err = relative_error(analytic, fd_grad_wrt_prediction(x, y, full))
        res.grad_err = max(res.grad_err, err)
        if not err <= GRAD_TOL:
            res.failures.append(f"trial {n}: gradient mismatch {err:.3e}")
        res.trials += 1
    return res


MICRO_CONFIG = dict(vocab_size=5, model_dim=6, feature_dim=4, latent_dim=3, decoder_blocks=2, warmup=10,
                    lr_dim=6, batch_size=1, beta_start=0, beta_end=10)


def micro_model_problem(seed: int = 0, **overrides):
    """64-bit micro model with K=4 tokens and a T=9 frame target; returns (store, loss_fn)."""
    cfg = ModelConfig(**{**MICRO_CONFIG, "seed": seed, **overrides})
    rng = np.random.default_rng(seed + 1)
    ids = rng.integers(0, cfg.vocab_size, size=4)
    target = rng.normal(size=(9, cfg.feature_dim))
    with ad.precision(64):
        store = init_params(cfg)
        # move duration logits off zero so softplus sits away from its flat tail
        store["dur.proj.bias"].value[...] = 0.7

    def loss_fn(s: ParameterStore):
        loss, _ = utterance_loss(s, cfg, ids, target, step=5, index=0, bn_capture={})
        return loss

    return store, loss_fn


def model_gradient_check(seed: int = 0, tolerance: float = MODEL_GRAD_TOL, max_elements: int | None = 12):
    store, loss_fn = micro_model_problem(seed)
    return check_gradients(loss_fn, store, seed=seed, tolerance=tolerance, max_elements=max_elements)


def upsampling_problem(seed: int = 0, tokens: int = 4, frames: int = 9, model_dim: int = 5):
    """Durations, token vectors and upsampler weights exposed as parameters of one scalar functional of O."""
    rng = np.random.default_rng(seed)
    with ad.precision(64):
        store = ParameterStore()
        store.add("d", rng.uniform(1.0, 3.5, size=tokens))
        store.add("V", rng.normal(size=(tokens, model_dim)))
        init_upsampler(store, rng, model_dim)
    probe = rng.normal(size=(frames, model_dim))

    def loss_fn(s: ParameterStore):
        seq = TokenSequence(s.tensor("V"), s.tensor("d"))
        params = UpsamplerParams.from_store(s, running={})
        bundle = align(seq, frames, params, s.tensor("up.proj"))
        return ad.tsum(ad.mul(bundle.O, probe))

    return store, loss_fn


def upsampling_gradient_check(seed: int = 0, tolerance: float = GRAD_TOL):
    store, loss_fn = upsampling_problem(seed)
    return check_gradients(loss_fn, store, seed=seed, tolerance=tolerance, max_elements=None)
