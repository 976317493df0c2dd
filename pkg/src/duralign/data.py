"""Synthetic token/spectrogram corpus with known ground-truth durations."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import Batch

MAGIC = b"DCORP\x00"
VERSION = 1


@dataclass
class SyntheticCorpusSpec:
    vocab_size: int = 20
    utterances: int = 200
    min_tokens: int = 3
    max_tokens: int = 10
    min_duration: int = 2
    max_duration: int = 8
    feature_dim: int = 8
    noise: float = 0.05
    crossfade: int = 1
    duration_jitter: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.min_duration < 1 or self.max_duration < self.min_duration:
            raise ValueError("duration range must satisfy 1 <= min_duration <= max_duration")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ValueError("token range must satisfy 1 <= min_tokens <= max_tokens")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.vocab_size < 1 or self.feature_dim < 1 or self.utterances < 0:
            raise ValueError("vocab_size and feature_dim must be >= 1, utterances >= 0")
        if self.crossfade < 0 or self.duration_jitter < 0:
            raise ValueError("crossfade and duration_jitter must be >= 0")


@dataclass
class Utterance:
    token_ids: np.ndarray
    durations: np.ndarray
    frames: np.ndarray
    alignment: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.alignment is None:
            self.alignment = np.repeat(np.arange(self.durations.size), self.durations)
        if self.frames.shape[0] != int(self.durations.sum()):
            raise ValueError("frame count must equal the sum of durations")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def duration_table(spec: SyntheticCorpusSpec) -> np.ndarray:
    """Base duration of every vocab id (a property of the token, fixed per seed)."""
    rng = np.random.default_rng([spec.seed, 1])
    return rng.integers(spec.min_duration, spec.max_duration + 1, size=spec.vocab_size)


def prototypes(spec: SyntheticCorpusSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    return rng.uniform(-1.0, 1.0, size=(spec.vocab_size, spec.feature_dim))


def render_frames(ids: np.ndarray, durations: np.ndarray, protos: np.ndarray, crossfade: int) -> np.ndarray:
    """Piecewise-constant prototype frames, linearly blended within ``crossfade`` frames of each boundary."""
    owner = np.repeat(np.arange(ids.size), durations)
    frames = protos[ids[owner]].copy()
    if crossfade == 0 or ids.size < 2:
        return frames
    bounds = np.cumsum(durations)[:-1]
    centers = np.arange(owner.size) + 0.5
    for k, b in enumerate(bounds):
        lo, hi = max(b - crossfade, 0), min(b + crossfade, owner.size)
        for t in range(lo, hi):
            w_next = np.clip((centers[t] - b + crossfade) / (2 * crossfade), 0.0, 1.0)
            frames[t] = (1.0 - w_next) * protos[ids[k]] + w_next * protos[ids[k + 1]]
    return frames


def generate_corpus(spec: SyntheticCorpusSpec) -> list[Utterance]:
    protos = prototypes(spec)
    base = duration_table(spec)
    rng = np.random.default_rng([spec.seed, 2])
    corpus = []
    for _ in range(spec.utterances):
        k = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        ids = rng.integers(0, spec.vocab_size, size=k)
        durs = base[ids].copy()
        if spec.duration_jitter:
            durs += rng.integers(-spec.duration_jitter, spec.duration_jitter + 1, size=k)
            durs = np.clip(durs, spec.min_duration, spec.max_duration)
        frames = render_frames(ids, durs, protos, spec.crossfade)
        frames = frames + rng.normal(0.0, spec.noise, size=frames.shape) if spec.noise > 0 else frames
        corpus.append(Utterance(ids, durs, frames.astype(np.float32)))
    return corpus


def split_corpus(corpus: Sequence[Utterance], holdout: float = 0.1) -> tuple[list, list]:
    """Training part and the held-out tail (last ``holdout`` fraction)."""
    n_hold = int(round(len(corpus) * holdout))
    cut = len(corpus) - n_hold
    return list(corpus[:cut]), list(corpus[cut:])


# ---------------------------------------------------------------- file format

class CorpusFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def corpus_to_bytes(corpus: Sequence[Utterance]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(corpus))]
    for u in corpus:
        k = u.token_ids.size
        out.append(struct.pack("<I", k))
        out.append(u.token_ids.astype("<u4").tobytes())
        out.append(u.durations.astype("<u4").tobytes())
        out.append(struct.pack("<II", *u.frames.shape))
        out.append(np.ascontiguousarray(u.frames, dtype="<f4").tobytes())
    return b"".join(out)


def save_corpus(corpus: Sequence[Utterance], path) -> None:
    Path(path).write_bytes(corpus_to_bytes(corpus))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorpusFormatError(f"truncated while reading {what}", max(self.pos, 1))
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype=dtype).copy()


def corpus_from_bytes(buf: bytes) -> list[Utterance]:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CorpusFormatError("bad magic", 0)
    version = r.u32("version")
    if version != VERSION:
        raise CorpusFormatError(f"unsupported version {version}", 6)
    count = r.u32("record count")
    corpus = []
    for n in range(count):
        start = r.pos
        k = r.u32(f"record {n} token count")
        ids = r.array("<u4", k, f"record {n} ids").astype(np.int64)
        durs = r.array("<u4", k, f"record {n} durations").astype(np.int64)
        t = r.u32(f"record {n} frame count")
        f = r.u32(f"record {n} feature dim")
        frames = r.array("<f4", t * f, f"record {n} frames").reshape(t, f)
        if int(durs.sum()) != t:
            raise CorpusFormatError(f"record {n}: durations sum to {int(durs.sum())}, T={t}", start)
        corpus.append(Utterance(ids, durs, frames))
    if r.pos != len(buf):
        raise CorpusFormatError("trailing bytes after last record", r.pos)
    return corpus


def load_corpus(path) -> list[Utterance]:
    return corpus_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- batching

def pad_batch(token_seqs: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> Batch:
    """Pad token and frame axes to the batch maxima; masks mark real positions."""
    B = len(token_seqs)
    kmax = max(len(ids) for ids in token_seqs)
    tmax = max(t.shape[0] for t in targets)
    F = targets[0].shape[1]
    ids = np.zeros((B, kmax), dtype=np.int64)
    tmask = np.zeros((B, kmax), dtype=bool)
    frames = np.zeros((B, tmax, F), dtype=np.float32)
    fmask = np.zeros((B, tmax), dtype=bool)
    for b, (tok, tgt) in enumerate(zip(token_seqs, targets)):
        k, t = len(tok), tgt.shape[0]
        ids[b, :k] = tok
        tmask[b, :k] = True
        frames[b, :t] = tgt
        fmask[b, :t] = True
    return Batch(ids, tmask, frames, fmask)


def make_batch(utterances: Sequence[Utterance]) -> Batch:
    return pad_batch([u.token_ids for u in utterances], [u.frames for u in utterances])


def batch_iterator(corpus: Sequence[Utterance], batch_size: int, seed: int = 0,
                   epochs: int | None = None) -> Iterator[Batch]:
    """Endless (or ``epochs``-long) stream of padded batches, reshuffled every epoch."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not corpus:
        return
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(corpus))
        for i in range(0, len(order), batch_size):
            yield make_batch([corpus[j] for j in order[i:i + batch_size]])
        epoch += 1
