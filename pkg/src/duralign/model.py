"""Toy non-autoregressive acoustic model trained with Soft-DTW.

token ids -> encoder -> (posterior | prior) latent -> duration predictor
-> learned upsampling -> decoder stack, each block emitting a spectrogram.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .aligner import (AlignmentBundle, TokenSequence, UpsamplerParams, align, duration_loss, inferred_frame_count,
                      init_duration_predictor, init_upsampler, predict_durations)
from .autodiff import Adam, ParameterStore, Tensor
from .softdtw import SoftDtwConfig, soft_dtw_loss

TRAIN_LENGTHS = ("target", "predicted")
BN_MOMENTUM = 0.99


@dataclass
class ModelConfig:
    vocab_size: int = 20
    model_dim: int = 32
    feature_dim: int = 8
    latent_dim: int = 4
    decoder_blocks: int = 6
    decoder_conv_width: int = 3
    duration_conv_width: int = 3
    gamma: float = 0.05
    warp: float = 128.0
    band_half_width: int = 30
    cost_indexing: str = "paper"
    lambda_dur: float = 100.0
    beta_start: int = 100
    beta_end: int = 1000
    warmup: int = 400
    lr_dim: int = 32
    batch_size: int = 8
    train_length: str = "target"
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "model_dim", "feature_dim", "latent_dim", "decoder_blocks", "warmup", "lr_dim",
                     "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("decoder_conv_width", "duration_conv_width"):
            if getattr(self, name) < 1 or getattr(self, name) % 2 == 0:
                raise ValueError(f"{name} must be a positive odd integer, got {getattr(self, name)}")
        if self.beta_start >= self.beta_end:
            raise ValueError("beta_start must be < beta_end")
        if self.train_length not in TRAIN_LENGTHS:
            raise ValueError(f"train_length must be one of {TRAIN_LENGTHS}, got {self.train_length!r}")
        SoftDtwConfig(self.gamma, self.warp, self.band_half_width, self.cost_indexing)

    @property
    def softdtw(self) -> SoftDtwConfig:
        return SoftDtwConfig(self.gamma, self.warp, self.band_half_width, self.cost_indexing)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ResidualLatent:
    mu: Tensor
    logvar: Tensor
    z: Tensor


@dataclass
class LossBreakdown:
    spec: list
    dur: float
    kl: float
    beta: float
    total: float
    frames: int = 0
    lambda_dur: float = 100.0

    def recombine(self) -> float:
        return sum(self.spec) / (len(self.spec) * self.frames) + self.lambda_dur * self.dur + self.beta * self.kl


# ---------------------------------------------------------------- init

def init_params(cfg: ModelConfig, seed: int | None = None) -> ParameterStore:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = ParameterStore()
    M, F, Z = cfg.model_dim, cfg.feature_dim, cfg.latent_dim
    g = ad.glorot_uniform
    zeros = lambda n: np.zeros(n, ad.default_dtype())  # noqa: E731

    store.add("enc.embed", g(rng, (cfg.vocab_size, M), cfg.vocab_size, M))
    for i in (1, 2):
        store.add(f"enc.conv{i}.kernel", g(rng, (3, M, M), 3 * M, M))
        store.add(f"enc.conv{i}.bias", zeros(M))

    store.add("post.query", g(rng, (M, M), M, M))
    store.add("post.key", g(rng, (F, M), F, M))
    store.add("post.value", g(rng, (F, M), F, M))
    store.add("post.mu.weight", g(rng, (M, Z), M, Z))
    store.add("post.mu.bias", zeros(Z))
    store.add("post.logvar.weight", g(rng, (M, Z), M, Z))
    store.add("post.logvar.bias", zeros(Z))

    init_duration_predictor(store, rng, M, Z, cfg.duration_conv_width)
    init_upsampler(store, rng, M)

    w = cfg.decoder_conv_width
    for l in range(cfg.decoder_blocks):
        p = f"dec{l}"
        store.add(f"{p}.glu.weight", g(rng, (M, 2 * M), M, 2 * M))
        store.add(f"{p}.glu.bias", zeros(2 * M))
        store.add(f"{p}.dw.kernel", g(rng, (w, M), w, M))
        store.add(f"{p}.out.weight", g(rng, (M, M), M, M))
        store.add(f"{p}.out.bias", zeros(M))
        store.add(f"{p}.ff1.weight", g(rng, (M, 2 * M), M, 2 * M))
        store.add(f"{p}.ff1.bias", zeros(2 * M))
        store.add(f"{p}.ff2.weight", g(rng, (2 * M, M), 2 * M, M))
        store.add(f"{p}.ff2.bias", zeros(M))
        store.add(f"{p}.head.weight", g(rng, (M, F), M, F))
        store.add(f"{p}.head.bias", zeros(F))
    return store


def config_from_store(store: ParameterStore, **overrides) -> ModelConfig:
    """Recover the structural fields of a ModelConfig from parameter shapes."""
    vocab, M = store["enc.embed"].value.shape
    F = store["post.key"].value.shape[0]
    Z = store["post.mu.weight"].value.shape[1]
    blocks = sum(1 for n in store if n.endswith(".head.weight"))
    structural = dict(
        vocab_size=vocab, model_dim=M, feature_dim=F, latent_dim=Z, decoder_blocks=blocks,
        decoder_conv_width=store["dec0.dw.kernel"].value.shape[0],
        duration_conv_width=store["dur.conv.kernel"].value.shape[0],
    )
    structural.update(overrides)
    return ModelConfig(**structural)


# ---------------------------------------------------------------- components

def sinusoidal_positions(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Interleaved sine/cosine position table (length, dim), base 10000."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def encode_tokens(token_ids: Sequence[int], store: ParameterStore) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    vocab = store["enc.embed"].value.shape[0]
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("encode_tokens expects a non-empty 1-D id sequence")
    if ids.min() < 0 or ids.max() >= vocab:
        raise ValueError(f"token id out of range [0, {vocab})")
    h = ad.getitem(store.tensor("enc.embed"), ids)
    for i in (1, 2):
        h = ad.swish(ad.conv1d(h, store.tensor(f"enc.conv{i}.kernel"), store.tensor(f"enc.conv{i}.bias")))
    return h


def posterior_latent(H: Tensor, target: np.ndarray, store: ParameterStore, rng: np.random.Generator) -> ResidualLatent:
    """Cross-attention from tokens to position-tagged target frames, then a reparameterized sample."""
    target = np.asarray(target)
    if target.ndim != 2 or target.shape[0] == 0:
        raise ValueError("posterior_latent needs a non-empty (T, F) target")
    frames = Tensor(target + sinusoidal_positions(*target.shape, dtype=H.dtype), dtype=H.dtype)
    q = ad.matmul(H, store.tensor("post.query"))
    k = ad.matmul(frames, store.tensor("post.key"))
    v = ad.matmul(frames, store.tensor("post.value"))
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(H.shape[1]))
    pooled = ad.matmul(ad.softmax(scores, axis=1), v)
    mu = ad.dense(pooled, store.tensor("post.mu.weight"), store.tensor("post.mu.bias"))
    logvar = ad.dense(pooled, store.tensor("post.logvar.weight"), store.tensor("post.logvar.bias"))
    eps = rng.standard_normal(mu.shape).astype(H.dtype)
    z = ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))
    return ResidualLatent(mu, logvar, z)


def prior_latent(num_tokens: int, latent_dim: int, dtype=None) -> ResidualLatent:
    zero = Tensor(np.zeros((num_tokens, latent_dim), dtype=dtype or ad.default_dtype()))
    return ResidualLatent(zero, zero, zero)


def kl_divergence(latent: ResidualLatent) -> Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over tokens."""
    mu, lv = latent.mu, latent.logvar
    per = ad.sub(ad.add(ad.exp(lv), ad.square(mu)), ad.add(lv, 1.0))
    return ad.mul(ad.tsum(per), 0.5 / mu.shape[0])


def _glu(x: Tensor) -> Tensor:
    half = x.shape[-1] // 2
    return ad.mul(x[:, :half], ad.sigmoid(x[:, half:]))


def decode_iterative(O: Tensor, store: ParameterStore, num_blocks: int | None = None) -> list[Tensor]:
    """Run the lightweight-conv decoder; returns one (T, F) prediction per block."""
    if num_blocks is None:
        num_blocks = sum(1 for n in store if n.endswith(".head.weight"))
    t = store.tensor
    x, preds = O, []
    for l in range(num_blocks):
        p = f"dec{l}"
        u = _glu(ad.dense(x, t(f"{p}.glu.weight"), t(f"{p}.glu.bias")))
        u = ad.depthwise_conv1d(u, ad.softmax(t(f"{p}.dw.kernel"), axis=0))
        x = ad.add(x, ad.dense(u, t(f"{p}.out.weight"), t(f"{p}.out.bias")))
        ff = ad.swish(ad.dense(x, t(f"{p}.ff1.weight"), t(f"{p}.ff1.bias")))
        x = ad.add(x, ad.dense(ff, t(f"{p}.ff2.weight"), t(f"{p}.ff2.bias")))
        preds.append(ad.dense(x, t(f"{p}.head.weight"), t(f"{p}.head.bias")))
    return preds


# ---------------------------------------------------------------- objective and schedules

def total_loss(preds: Sequence[Tensor], target: np.ndarray, d: Tensor, latent: ResidualLatent, beta: float,
               cfg: ModelConfig) -> tuple[Tensor, LossBreakdown]:
    """Soft-DTW per block normalized by L*T, plus weighted duration and KL terms."""
    T = int(np.asarray(target).shape[0])
    L = len(preds)
    if L < 1:
        raise ValueError("total_loss needs at least one prediction")
    sdtw = cfg.softdtw
    spec_terms = [soft_dtw_loss(target, p, sdtw) for p in preds]
    spec_sum = spec_terms[0]
    for term in spec_terms[1:]:
        spec_sum = ad.add(spec_sum, term)
    dur = duration_loss(d, T)
    kl = kl_divergence(latent)
    total = ad.add(ad.add(ad.mul(spec_sum, 1.0 / (L * T)), ad.mul(dur, cfg.lambda_dur)), ad.mul(kl, beta))
    breakdown = LossBreakdown(
        spec=[float(s.data) for s in spec_terms], dur=float(dur.data), kl=float(kl.data), beta=float(beta),
        total=float(total.data), frames=T, lambda_dur=cfg.lambda_dur,
    )
    return total, breakdown


def beta_schedule(step: int, start: int, end: int) -> float:
    if start >= end:
        raise ValueError("beta_schedule needs start < end")
    if step <= start:
        return 0.0
    if step >= end:
        return 1.0
    return (step - start) / (end - start)


def lr_schedule(step: int, warmup: int, dim: int) -> float:
    """Inverse-square-root decay after a linear warmup."""
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    step = max(step, 1)
    return dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def control_durations(d, spans: Sequence[tuple[int, int, float]]) -> np.ndarray:
    """Scale durations on half-open token spans ``[start, end)`` by their factors."""
    d = np.array(d.data if isinstance(d, Tensor) else d, dtype=np.float64)
    covered = np.zeros(d.size, dtype=bool)
    out = d.copy()
    for start, end, factor in spans:
        if factor < 0:
            raise ValueError(f"duration factor must be >= 0, got {factor}")
        if not 0 <= start < end <= d.size:
            raise ValueError(f"span [{start}, {end}) outside [0, {d.size})")
        if covered[start:end].any():
            raise ValueError("duration control spans overlap")
        covered[start:end] = True
        out[start:end] = factor * d[start:end]
    return out


# ---------------------------------------------------------------- forward passes

@dataclass
class ForwardResult:
    preds: list
    seq: TokenSequence
    bundle: AlignmentBundle
    latent: ResidualLatent
    frames: int


def forward(store: ParameterStore, cfg: ModelConfig, token_ids, target: np.ndarray | None = None,
            rng: np.random.Generator | None = None, mode: str = "train",
            duration_control: Callable[[np.ndarray], np.ndarray] | None = None,
            frames: int | None = None, bn_capture: dict | None = None) -> ForwardResult:
    """One utterance through the whole model.

    ``mode="train"`` samples the posterior latent (needs ``target`` and ``rng``)
    and uses batch statistics; ``mode="infer"`` uses the zero prior latent and
    running statistics. The upsampled length is the target length in train
    mode (unless ``cfg.train_length == "predicted"``) and the rounded duration
    sum otherwise; ``frames`` forces it. Passing an empty ``bn_capture`` dict
    in train mode records the batch-norm batch statistics there instead of
    updating the store's running statistics.
    """
    H = encode_tokens(token_ids, store)
    K = H.shape[0]
    if mode == "train":
        if target is None or rng is None:
            raise ValueError("train mode needs a target and an rng")
        latent = posterior_latent(H, target, store, rng)
    elif mode == "infer":
        latent = prior_latent(K, cfg.latent_dim, H.dtype)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    seq = predict_durations(H, latent.z, store)
    if duration_control is not None:
        scaled = np.asarray(duration_control(seq.d.data.astype(np.float64)))
        ratio = np.divide(scaled, seq.d.data, out=np.zeros_like(scaled), where=seq.d.data != 0)
        seq = TokenSequence(seq.V, ad.mul(seq.d, ratio))
        if frames is None and mode == "infer":
            frames = inferred_frame_count(scaled)
    if frames is None:
        if mode == "train" and cfg.train_length == "target":
            frames = int(np.asarray(target).shape[0])
        else:
            frames = inferred_frame_count(seq.d)
    params = UpsamplerParams.from_store(store, bn_mode=mode, running=bn_capture if mode == "train" else None)
    bundle = align(seq, frames, params, store.tensor("up.proj"))
    preds = decode_iterative(bundle.O, store, cfg.decoder_blocks)
    return ForwardResult(preds, seq, bundle, latent, frames)


def utterance_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, index])


def utterance_loss(store: ParameterStore, cfg: ModelConfig, token_ids, target: np.ndarray, step: int,
                   index: int = 0, bn_capture: dict | None = None) -> tuple[Tensor, LossBreakdown]:
    res = forward(store, cfg, token_ids, target, utterance_rng(cfg.seed, step, index), bn_capture=bn_capture)
    beta = beta_schedule(step, cfg.beta_start, cfg.beta_end)
    return total_loss(res.preds, target, res.seq.d, res.latent, beta, cfg)


# ---------------------------------------------------------------- training

@dataclass
class Batch:
    """Padded utterances with validity masks over the token and frame axes."""

    token_ids: np.ndarray
    token_mask: np.ndarray
    frames: np.ndarray
    frame_mask: np.ndarray

    def __len__(self):
        return self.token_ids.shape[0]

    def utterances(self):
        """Yield (index, ids, target) for every row holding at least one token."""
        for b in range(len(self)):
            tm = self.token_mask[b]
            fm = self.frame_mask[b]
            if not tm.any() or not fm.any():
                continue
            yield b, self.token_ids[b][tm], self.frames[b][fm]


def mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    n = len(parts)
    L = len(parts[0].spec)
    return LossBreakdown(
        spec=[sum(p.spec[l] for p in parts) / n for l in range(L)],
        dur=sum(p.dur for p in parts) / n,
        kl=sum(p.kl for p in parts) / n,
        beta=parts[0].beta,
        total=sum(p.total for p in parts) / n,
        frames=round(sum(p.frames for p in parts) / n),
        lambda_dur=parts[0].lambda_dur,
    )


BN_PREFIX = "up.bn"


@dataclass
class Trainer:
    """Owns the parameters and optimizer state for a training run.

    Utterances in a batch are independent graphs. Their gradients and
    batch-norm statistics are reduced in batch order after all of them have
    run, so ``threads > 1`` gives bit-identical results.
    """

    cfg: ModelConfig
    store: ParameterStore = None
    optimizer: Adam = field(default_factory=Adam)
    step: int = 0
    threads: int = 1
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.store is None:
            self.store = init_params(self.cfg)

    def _utterance(self, b, ids, target, scale):
        sink, stats = {}, {}
        loss, breakdown = utterance_loss(self.store, self.cfg, ids, target, self.step, b, bn_capture=stats)
        ad.backward(ad.mul(loss, scale), sink)
        return sink, stats, breakdown

    def train_step(self, batch: Batch) -> LossBreakdown:
        """Forward, objective, backward and one Adam update; returns the batch-mean breakdown."""
        rows = list(batch.utterances())
        if not rows:
            raise ValueError("train_step: empty batch")
        self.step += 1
        store = self.store
        store.zero_grad()
        scale = 1.0 / len(rows)
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(lambda r: self._utterance(*r, scale), rows))
        else:
            results = [self._utterance(*r, scale) for r in rows]

        by_id = {id(p): p for _, p in store.items()}
        running_mean = store[f"{BN_PREFIX}.running_mean"].value
        running_var = store[f"{BN_PREFIX}.running_var"].value
        for sink, stats, _ in results:
            for key, g in sink.items():
                by_id[key].grad += g
            running_mean[...] = BN_MOMENTUM * running_mean + (1.0 - BN_MOMENTUM) * stats["mean"]
            running_var[...] = BN_MOMENTUM * running_var + (1.0 - BN_MOMENTUM) * stats["var"]
        self.optimizer.step(store, lr_schedule(self.step, self.cfg.warmup, self.cfg.lr_dim))
        out = mean_breakdown([r[2] for r in results])
        self.history.append(out)
        return out


def train_step(batch: Batch, store: ParameterStore, step: int, cfg: ModelConfig, optimizer: Adam) -> LossBreakdown:
    """Functional form of :meth:`Trainer.train_step` for an explicit step counter."""
    trainer = Trainer(cfg, store, optimizer, step - 1)
    return trainer.train_step(batch)


# ---------------------------------------------------------------- inference

@dataclass
class InferenceResult:
    spectrogram: np.ndarray
    durations: np.ndarray
    attention: np.ndarray


def infer(store: ParameterStore, cfg: ModelConfig, token_ids,
          duration_control: Callable[[np.ndarray], np.ndarray] | None = None) -> InferenceResult:
    if len(token_ids) == 0:
        raise ValueError("infer: empty token sequence")
    res = forward(store, cfg, token_ids, mode="infer", duration_control=duration_control)
    return InferenceResult(res.preds[-1].data.copy(), res.seq.d.data.copy(), res.bundle.W.data.copy())


def attention_monotonicity(W: np.ndarray) -> float:
    """Fraction of consecutive frames whose argmax token does not move backwards."""
    path = np.argmax(W, axis=1)
    if path.size < 2:
        return 1.0
    return float(np.mean(np.diff(path) >= 0))


def token_coverage(W: np.ndarray) -> float:
    """Fraction of tokens that are the argmax token of at least one frame."""
    return float(np.unique(np.argmax(W, axis=1)).size / W.shape[1])
