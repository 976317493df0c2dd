"""Acceptance criteria 1-8, each checked at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists one
PASS/FAIL line per criterion.
"""
import time

import numpy as np
import pytest

from duralign import autodiff as ad
from duralign.aligner import (TokenSequence, UpsamplerParams, align, indicator_attention, init_upsampler,
                              length_regulator, upsample)
from duralign.autodiff import ParameterStore, Tensor
from duralign.checkpoint import checkpoint_to_bytes, load_checkpoint, save_checkpoint
from duralign.checks import (GRAD_TOL, MICRO_CONFIG, MODEL_GRAD_TOL, fd_grad_wrt_prediction, model_gradient_check, micro_model_problem,
                             run_dtw_checks, upsampling_gradient_check)
from duralign.data import load_corpus, save_corpus, split_corpus
from duralign.experiment import evaluate, final_block_per_frame
from duralign.model import ModelConfig, control_durations, infer, utterance_loss
from duralign.softdtw import SoftDtwConfig, soft_dtw, soft_dtw_grad


def test_1_oracle_equivalence(verdict):
    start = time.perf_counter()
    res = run_dtw_checks(trials=100, max_len=6, max_features=3, seed=2024, gamma=0.05, warp=128.0)
    seconds = time.perf_counter() - start
    ok = res.oracle_err <= 1e-10 and res.trials == 100 and seconds < 10
    verdict(1, ok, f"max |banded - enumeration| = {res.oracle_err:.2e} (tol 1e-10), {seconds:.2f}s (< 10s)")
    assert ok


def test_2_hard_limit(verdict):
    res = run_dtw_checks(trials=100, max_len=6, max_features=3, seed=2024, gamma=0.05, warp=128.0)
    ok = res.hard_err <= 1e-2
    verdict(2, ok, f"max |soft(gamma=1e-4) - hard| = {res.hard_err:.2e} (tol 1e-2)")
    assert ok


def test_3_gradient_suite(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    sdtw_err = 0.0
    for _ in range(20):
        tx, ty = rng.integers(2, 8, size=2)
        x, y = rng.normal(size=(tx, 3)), rng.normal(size=(ty, 3))
        cfg = SoftDtwConfig(0.05, float(rng.uniform(0, 2)), int(max(tx, ty)))
        sdtw_err = max(sdtw_err, ad.relative_error(soft_dtw_grad(x, y, cfg), fd_grad_wrt_prediction(x, y, cfg)))
    up = upsampling_gradient_check(seed=3)
    model = model_gradient_check(seed=0)
    seconds = time.perf_counter() - start
    ok = sdtw_err <= GRAD_TOL and up.max_rel_err <= GRAD_TOL and model.max_rel_err <= MODEL_GRAD_TOL and seconds < 60
    verdict(3, ok, f"soft_dtw_grad {sdtw_err:.2e}, upsampling {up.max_rel_err:.2e} (tol 1e-4), "
                   f"end-to-end {model.max_rel_err:.2e} (tol 1e-3), {seconds:.1f}s (< 60s)")
    assert ok, up.format() + "\n" + model.format()


def test_4_band_consistency_and_budget(verdict):
    rng = np.random.default_rng(11)
    err = 0.0
    for _ in range(20):
        tx, ty = rng.integers(1, 40, size=2)
        x, y = rng.normal(size=(tx, 4)), rng.normal(size=(ty, 4))
        full = soft_dtw(x, y, SoftDtwConfig(0.05, 1.0, int(max(tx, ty))))[0]
        huge = soft_dtw(x, y, SoftDtwConfig(0.05, 1.0, int(4 * max(tx, ty) + 3)))[0]
        err = max(err, abs(full - huge))
    x, y = rng.normal(size=(2000, 80)), rng.normal(size=(2000, 80))
    cfg = SoftDtwConfig(0.05, 128.0, 30)
    soft_dtw(x[:50], y[:50], cfg)  # compile outside the timed region
    start = time.perf_counter()
    soft_dtw(x, y, cfg)
    seconds = time.perf_counter() - start
    ok = err <= 1e-12 and seconds <= 1.0
    verdict(4, ok, f"max band inconsistency {err:.2e} (tol 1e-12), T=2000 F=80 width 60 in {seconds:.3f}s (<= 1s)")
    assert ok


def test_5_structural_invariants(verdict):
    rng = np.random.default_rng(5)
    row_err = grid_err = 0.0
    with ad.precision(64):
        store = ParameterStore()
        init_upsampler(store, rng, 6)
        params = UpsamplerParams.from_store(store, running={})
        for _ in range(20):
            k = int(rng.integers(1, 9))
            d = rng.uniform(0.0, 6.0, size=k)
            T = int(rng.integers(1, 40))
            b = align(TokenSequence(Tensor(rng.normal(size=(k, 6))), Tensor(d)), T, params, store.tensor("up.proj"))
            row_err = max(row_err, float(np.max(np.abs(b.W.data.sum(axis=1) - 1.0))))
            grid_err = max(grid_err, float(np.max(np.abs(b.S.data + b.E.data - d[None, :]))))
        durations = rng.integers(1, 6, size=7)
        V = rng.normal(size=(7, 6))
        W = indicator_attention(durations)
        O = upsample(Tensor(W), Tensor(V), Tensor(np.zeros(W.shape + (2,))), store.tensor("up.proj")).data
        regulator_exact = np.array_equal(O, length_regulator(V, durations))
    store, loss_fn = micro_model_problem(0)
    cfg = ModelConfig(**MICRO_CONFIG)
    recombine_err = 0.0
    with ad.precision(64):
        for step in (1, 5, 20):
            ids = rng.integers(0, 5, size=4)
            loss, parts = utterance_loss(store, cfg, ids, rng.normal(size=(9, 4)), step, 0, {})
            recombine_err = max(recombine_err, abs(parts.recombine() - float(loss.data)))
    ok = row_err <= 1e-6 and grid_err <= 1e-12 and regulator_exact and recombine_err <= 1e-9
    verdict(5, ok, f"row sums {row_err:.1e} (tol 1e-6), S+E-d {grid_err:.1e}, "
                   f"length regulator exact={regulator_exact}, recombination {recombine_err:.1e} (tol 1e-9)")
    assert ok


@pytest.mark.slow
def test_6_toy_training(verdict, toy_run):
    _, held = split_corpus(toy_run.corpus, toy_run.run.holdout)
    report = evaluate(toy_run.trainer.store, toy_run.run.model, held)
    per_frame = [final_block_per_frame(b) for b in toy_run.trainer.history]
    early, late = float(np.mean(per_frame[:100])), float(np.mean(per_frame[-100:]))
    reduction = 1.0 - late / early
    ok = (report.duration_error <= 1.0 and report.duration_correlation >= 0.8 and reduction >= 0.5
          and toy_run.seconds <= 600)
    verdict(6, ok, f"held-out |T-sum d|/K = {report.duration_error:.3f} (<= 1.0), "
                   f"r = {report.duration_correlation:.3f} (>= 0.8), final-block SDTW/frame {early:.3f} -> {late:.3f} "
                   f"({100 * reduction:.0f}% drop, >= 50%), coverage {report.coverage:.2f}, {toy_run.seconds:.0f}s")
    assert ok


@pytest.mark.slow
def test_7_duration_control(verdict, toy_run):
    store, cfg = toy_run.trainer.store, toy_run.run.model
    _, held = split_corpus(toy_run.corpus, toy_run.run.holdout)
    global_ok = span_ok = True
    for u in held:
        ids = u.token_ids
        base = infer(store, cfg, ids).durations.astype(np.float64)
        for alpha in (0.75, 1.0, 1.25):
            res = infer(store, cfg, ids, lambda d: control_durations(d, [(0, d.size, alpha)]))
            global_ok &= res.spectrogram.shape[0] == max(1, int(np.floor(alpha * base.sum() + 0.5)))
            global_ok &= res.attention.shape == (res.spectrogram.shape[0], ids.size)
        a, b = ids.size - 2, ids.size
        for f in (0.5, 1.0, 1.5):
            scaled = control_durations(base, [(a, b, f)])
            span_ok &= abs((scaled.sum() - base.sum()) - (f - 1.0) * base[a:b].sum()) <= 1e-9
            got = infer(store, cfg, ids, lambda d: control_durations(d, [(a, b, f)])).durations.astype(np.float64)
            span_ok &= np.array_equal(got[:a], base[:a])
            span_ok &= bool(np.allclose(got[a:b], f * base[a:b], rtol=1e-6, atol=0))
    ok = bool(global_ok and span_ok)
    verdict(7, ok, f"global factors 0.75/1.0/1.25 frame counts exact={bool(global_ok)}, "
                   f"span factors 0.5/1.0/1.5 local and sum-exact={bool(span_ok)} on {len(held)} utterances")
    assert ok


@pytest.mark.slow
def test_8_serialization(verdict, toy_run, tmp_path):
    corpus = load_corpus(toy_run.corpus_path)
    save_corpus(corpus, tmp_path / "again.bin")
    corpus_ok = (tmp_path / "again.bin").read_bytes() == toy_run.corpus_path.read_bytes()

    store, step = load_checkpoint(toy_run.checkpoint)
    save_checkpoint(store, step, tmp_path / "again.ckpt")
    ckpt_ok = (tmp_path / "again.ckpt").read_bytes() == toy_run.checkpoint.read_bytes()
    ckpt_ok &= checkpoint_to_bytes(toy_run.trainer.store, toy_run.trainer.step) == toy_run.checkpoint.read_bytes()

    cfg = toy_run.run.model
    _, held = split_corpus(corpus, toy_run.run.holdout)
    before = [utterance_loss(toy_run.trainer.store, cfg, u.token_ids, u.frames, step, i, {})[0].data.tobytes()
              for i, u in enumerate(held)]
    after = [utterance_loss(store, cfg, u.token_ids, u.frames, step, i, {})[0].data.tobytes()
             for i, u in enumerate(held)]
    eval_same = evaluate(toy_run.trainer.store, cfg, held) == evaluate(store, cfg, held)
    ok = corpus_ok and ckpt_ok and before == after and eval_same
    verdict(8, ok, f"corpus bytes identical={corpus_ok}, checkpoint bytes identical={ckpt_ok}, "
                   f"reloaded loss bit-identical={before == after}, eval identical={eval_same}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
