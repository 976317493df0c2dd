"""Training loop and held-out scoring against the generator's ground truth."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import ParameterStore
from .data import Utterance, batch_iterator
from .model import LossBreakdown, ModelConfig, Trainer, attention_monotonicity, forward, token_coverage
from .softdtw import soft_dtw


def run_training(cfg: ModelConfig, corpus: Sequence[Utterance], steps: int, trainer: Trainer | None = None,
                 threads: int = 1, on_step: Callable[[int, LossBreakdown], None] | None = None) -> Trainer:
    """Run ``steps`` optimizer steps over seeded, reshuffled batches of ``corpus``."""
    trainer = trainer or Trainer(cfg, threads=threads)
    if steps <= 0:
        return trainer
    batches = batch_iterator(corpus, cfg.batch_size, cfg.seed)
    for _ in range(steps):
        breakdown = trainer.train_step(next(batches))
        if on_step is not None:
            on_step(trainer.step, breakdown)
    return trainer


def final_block_per_frame(b: LossBreakdown) -> float:
    return b.spec[-1] / b.frames


@dataclass
class EvalReport:
    duration_error: float
    duration_correlation: float
    sdtw_per_frame: float
    coverage: float
    monotonicity: float
    utterances: int

    HEADER = "utterances,duration_error,duration_correlation,sdtw_per_frame,coverage,monotonicity"

    def csv_line(self) -> str:
        return (f"{self.utterances},{self.duration_error:.6f},{self.duration_correlation:.6f},"
                f"{self.sdtw_per_frame:.6f},{self.coverage:.6f},{self.monotonicity:.6f}")


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.std(a) == 0 or np.std(b) == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def evaluate(store: ParameterStore, cfg: ModelConfig, utterances: Sequence[Utterance]) -> EvalReport:
    """Score inference-mode predictions (zero latent) on utterances the model never trained on.

    Durations come from the prior path only. The Soft-DTW term upsamples to the
    target length so it measures content, not the length error already
    captured by ``duration_error``; coverage and monotonicity use the
    model's own frame count.
    """
    if not utterances:
        raise ValueError("evaluate: no utterances")
    pred_d, true_d, dur_err, sdtw, cover, mono = [], [], [], [], [], []
    sdtw_cfg = cfg.softdtw
    for u in utterances:
        res = forward(store, cfg, u.token_ids, mode="infer")
        d = res.seq.d.data.astype(np.float64)
        pred_d.extend(d)
        true_d.extend(u.durations)
        dur_err.append(abs(u.num_frames - d.sum()) / d.size)
        W = res.bundle.W.data
        cover.append(token_coverage(W))
        mono.append(attention_monotonicity(W))
        teacher = forward(store, cfg, u.token_ids, mode="infer", frames=u.num_frames)
        value, _ = soft_dtw(u.frames, teacher.preds[-1].data, sdtw_cfg)
        sdtw.append(value / u.num_frames)
    return EvalReport(
        duration_error=float(np.mean(dur_err)),
        duration_correlation=pearson(pred_d, true_d),
        sdtw_per_frame=float(np.mean(sdtw)),
        coverage=float(np.mean(cover)),
        monotonicity=float(np.mean(mono)),
        utterances=len(utterances),
    )
