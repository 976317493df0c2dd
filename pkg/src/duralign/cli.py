"""Command-line entry point: data generation, training, inference and self-checks.

Exit codes: 0 success, 1 check failure, 2 config/input error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .checks import MODEL_GRAD_TOL, model_gradient_check, run_dtw_checks, upsampling_gradient_check
from .config import ConfigError, RunConfig, load_run_config
from .data import CorpusFormatError, generate_corpus, load_corpus, save_corpus, split_corpus
from .experiment import EvalReport, evaluate, run_training
from .model import Trainer, config_from_store, control_durations, infer

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
LOSS_HEADER = "step,spec,dur,kl,beta,total"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"missing value for --{key}") from None
        pairs.append((key, value))
    return pairs


def _resolve(path, extra) -> RunConfig:
    cfg = load_run_config(path, _overrides(extra))
    print(cfg.format(), flush=True)
    return cfg


def _read_corpus(path):
    try:
        return load_corpus(path)
    except FileNotFoundError as exc:
        raise CliError(f"cannot read corpus: {exc}", EXIT_IO) from None
    except CorpusFormatError as exc:
        raise CliError(f"malformed corpus {path}: {exc}", EXIT_CONFIG) from None
    except OSError as exc:
        raise CliError(f"cannot read corpus: {exc}", EXIT_IO) from None


def _read_checkpoint(path):
    try:
        return load_checkpoint(path, ad.default_dtype())
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO) from None
    except CheckpointFormatError as exc:
        raise CliError(f"malformed checkpoint {path}: {exc}", EXIT_CONFIG) from None


def _write(path, data, mode="w"):
    try:
        with open(path, mode) as fh:
            fh.write(data)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, extra) -> int:
    cfg = _resolve(args.spec, extra)
    corpus = generate_corpus(cfg.corpus)
    try:
        save_corpus(corpus, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    print(f"wrote {len(corpus)} utterances to {args.out}")
    return EXIT_OK


def train_to_files(run: RunConfig, corpus, out) -> Trainer:
    """Train on the leading split of ``corpus``; writes ``out`` and ``<out>.losses.csv``.

    The loss file gets one line per ``run.log_every`` steps holding window means,
    with a final partial window if the step count is not a multiple.
    """
    train, _ = split_corpus(corpus, run.holdout)
    if run.steps > 0 and not train:
        raise CliError("training split is empty", EXIT_CONFIG)
    loss_path = f"{out}.losses.csv"
    _write(loss_path, LOSS_HEADER + "\n")
    window = []

    def flush(step):
        n = len(window)
        cols = [
            sum(sum(b.spec) / (len(b.spec) * b.frames) for b in window) / n,
            sum(b.dur for b in window) / n,
            sum(b.kl for b in window) / n,
            sum(b.beta for b in window) / n,
            sum(b.total for b in window) / n,
        ]
        _write(loss_path, f"{step}," + ",".join(f"{c:.6f}" for c in cols) + "\n", "a")
        window.clear()

    def on_step(step, breakdown):
        window.append(breakdown)
        if len(window) == run.log_every:
            flush(step)
            print(f"step {step} total {breakdown.total:.4f}", flush=True)

    trainer = run_training(run.model, train, run.steps, Trainer(run.model, threads=run.threads), on_step=on_step)
    if window:
        flush(trainer.step)
    try:
        save_checkpoint(trainer.store, trainer.step, out)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from None
    return trainer


def cmd_train(args, extra) -> int:
    if args.steps is not None:
        extra = [*extra, "--steps", str(args.steps)]
    if args.threads is not None:
        extra = [*extra, "--threads", str(args.threads)]
    run = _resolve(args.config, extra)
    trainer = train_to_files(run, _read_corpus(args.data), args.out)
    print(f"wrote checkpoint {args.out} at step {trainer.step}")
    return EXIT_OK


def cmd_grad_check(args, extra) -> int:
    _resolve(args.config, extra)
    ok = True
    for title, report in (("upsampling path", upsampling_gradient_check(args.seed)),
                          ("micro model (end to end)", model_gradient_check(args.seed, tolerance=MODEL_GRAD_TOL))):
        print(f"== {title}: max rel err {report.max_rel_err:.3e} (tol {report.tolerance:g})")
        print(report.format())
        ok = ok and report.ok
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_dtw_check(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    if args.trials < 0 or args.max_len < 1:
        raise ConfigError("--trials must be >= 0 and --max-len >= 1")
    res = run_dtw_checks(args.trials, args.max_len, seed=args.seed, cost_indexing=args.cost_indexing,
                         corrupt_warp=args.corrupt_warp)
    print(res.summary())
    for f in res.failures[:20]:
        print(f"  {f}")
    print("PASS" if res.ok else "FAIL")
    return EXIT_OK if res.ok else EXIT_CHECK


def _parse_tokens(text: str, vocab: int) -> np.ndarray:
    try:
        ids = np.array([int(t) for t in text.split(",") if t.strip() != ""], dtype=np.int64)
    except ValueError:
        raise ConfigError(f"bad --tokens {text!r}") from None
    if ids.size == 0:
        raise ConfigError("--tokens is empty")
    if ids.min() < 0 or ids.max() >= vocab:
        raise ConfigError(f"token id out of range [0, {vocab}) in {text!r}")
    return ids


def _parse_span(text: str) -> tuple[int, int, float]:
    try:
        a, b, f = text.split(":")
        return int(a), int(b), float(f)
    except ValueError:
        raise ConfigError(f"bad --span {text!r}; expected start:end:factor") from None


def write_alignment(W: np.ndarray, path) -> None:
    """``<path>.txt`` with one 6-decimal row per frame and ``<path>.pgm`` (P5, maxval 255)."""
    text = "\n".join(" ".join(f"{v:.6f}" for v in row) for row in W) + "\n"
    _write(f"{path}.txt", text)
    pixels = np.floor(255.0 * np.clip(W, 0.0, 1.0) + 0.5).astype(np.uint8)
    header = f"P5\n{W.shape[1]} {W.shape[0]}\n255\n".encode("ascii")
    _write(f"{path}.pgm", header + pixels.tobytes(), "wb")


def cmd_infer(args, extra) -> int:
    run = _resolve(args.config, extra)
    store, _ = _read_checkpoint(args.checkpoint)
    cfg = config_from_store(store, **{k: getattr(run.model, k) for k in ("gamma", "warp", "band_half_width",
                                                                         "cost_indexing", "seed")})
    ids = _parse_tokens(args.tokens, cfg.vocab_size)
    if args.scale is not None and args.span:
        raise ConfigError("use either --scale or --span, not both")
    spans = [(0, ids.size, args.scale)] if args.scale is not None else [_parse_span(s) for s in args.span]
    control = None
    if spans:
        control_durations(np.ones(ids.size), spans)  # validate before running the model
        control = lambda d: control_durations(d, spans)  # noqa: E731
    res = infer(store, cfg, ids, control)
    prefix = args.out
    _write(f"{prefix}.spec.csv", "\n".join(",".join(f"{v:.6f}" for v in row) for row in res.spectrogram) + "\n")
    _write(f"{prefix}.durations.csv",
           "token,id,duration\n" + "".join(f"{k},{i},{d:.6f}\n" for k, (i, d) in enumerate(zip(ids, res.durations))))
    if args.dump_align:
        write_alignment(res.attention, args.dump_align)
    print(f"frames: {res.spectrogram.shape[0]}")
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    run = _resolve(args.config, extra)
    store, _ = _read_checkpoint(args.checkpoint)
    cfg = config_from_store(store, **{k: getattr(run.model, k) for k in ("gamma", "warp", "band_half_width",
                                                                         "cost_indexing", "seed")})
    corpus = _read_corpus(args.data)
    _, held = split_corpus(corpus, run.holdout)
    if not held:
        raise CliError("held-out split is empty", EXIT_CONFIG)
    report = evaluate(store, cfg, held)
    print("# " + EvalReport.HEADER)
    print(report.csv_line())
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duralign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--spec", default=None, help="key = value config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a corpus and write a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks at 64-bit")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dtw-check", help="Soft-DTW against its oracles")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--max-len", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cost-indexing", choices=("paper", "symmetric"), default="paper")
    p.add_argument("--corrupt-warp", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_dtw_check)

    p = sub.add_parser("infer", help="synthesize a spectrogram for token ids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", required=True, help="comma-separated token ids")
    p.add_argument("--scale", type=float, default=None, help="global duration factor")
    p.add_argument("--span", action="append", default=[], help="start:end:factor over tokens [start, end)")
    p.add_argument("--dump-align", default=None, help="path prefix for W as .txt and .pgm")
    p.add_argument("--out", default="infer", help="output prefix for .spec.csv and .durations.csv")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        ad.default_dtype()
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
