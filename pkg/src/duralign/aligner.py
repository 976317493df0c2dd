"""Differentiable duration modeling and learned upsampling.

Durations stay real-valued end to end: boundaries, distance grids, the
attention matrix and the auxiliary context are all smooth functions of ``d``,
so the reconstruction loss can push token boundaries around.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

CONV_WIDTH = 3
CONV_DIM = 8
ATTN_HIDDEN = 16
CONTEXT_DIM = 2
MLP_IN = 2 + CONV_DIM


@dataclass
class TokenSequence:
    V: Tensor
    d: Tensor

    def __post_init__(self):
        if self.V.shape[0] < 1:
            raise ValueError("TokenSequence needs at least one token")
        if self.d.shape != (self.V.shape[0],):
            raise ValueError(f"durations shape {self.d.shape} does not match {self.V.shape[0]} tokens")


@dataclass
class AlignmentBundle:
    s: Tensor
    e: Tensor
    S: Tensor
    E: Tensor
    W: Tensor
    C: Tensor
    O: Tensor


def _shape_guard(name: str, t: Tensor, shape: tuple):
    if t.shape != shape:
        raise ValueError(f"{name}: expected shape {shape}, got {t.shape}")


@dataclass
class UpsamplerParams:
    """Weights of the shared token convolution and the W- and C-branch MLPs."""

    conv_kernel: Tensor
    conv_bias: Tensor
    bn_scale: Tensor
    bn_shift: Tensor
    bn_running: dict | None
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    c1: Tensor
    cb1: Tensor
    c2: Tensor
    cb2: Tensor
    bn_mode: str = "train"

    def __post_init__(self):
        m = self.conv_kernel.shape[1]
        _shape_guard("conv_kernel", self.conv_kernel, (CONV_WIDTH, m, CONV_DIM))
        _shape_guard("conv_bias", self.conv_bias, (CONV_DIM,))
        _shape_guard("bn_scale", self.bn_scale, (CONV_DIM,))
        _shape_guard("bn_shift", self.bn_shift, (CONV_DIM,))
        _shape_guard("w1", self.w1, (MLP_IN, ATTN_HIDDEN))
        _shape_guard("b1", self.b1, (ATTN_HIDDEN,))
        _shape_guard("w2", self.w2, (ATTN_HIDDEN, ATTN_HIDDEN))
        _shape_guard("b2", self.b2, (ATTN_HIDDEN,))
        _shape_guard("w3", self.w3, (ATTN_HIDDEN, 1))
        _shape_guard("b3", self.b3, (1,))
        _shape_guard("c1", self.c1, (MLP_IN, CONTEXT_DIM))
        _shape_guard("cb1", self.cb1, (CONTEXT_DIM,))
        _shape_guard("c2", self.c2, (CONTEXT_DIM, CONTEXT_DIM))
        _shape_guard("cb2", self.cb2, (CONTEXT_DIM,))

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str = "up", bn_mode: str = "train",
                   running: dict | None = None) -> "UpsamplerParams":
        """Bind store entries; ``running`` overrides the batch-norm statistics dict (e.g. an empty capture dict)."""
        t = store.tensor
        if running is None:
            running = {"mean": store[f"{prefix}.bn.running_mean"].value, "var": store[f"{prefix}.bn.running_var"].value}
        return cls(
            t(f"{prefix}.conv.kernel"), t(f"{prefix}.conv.bias"),
            t(f"{prefix}.bn.scale"), t(f"{prefix}.bn.shift"), running,
            t(f"{prefix}.attn.w1"), t(f"{prefix}.attn.b1"),
            t(f"{prefix}.attn.w2"), t(f"{prefix}.attn.b2"),
            t(f"{prefix}.attn.w3"), t(f"{prefix}.attn.b3"),
            t(f"{prefix}.ctx.w1"), t(f"{prefix}.ctx.b1"),
            t(f"{prefix}.ctx.w2"), t(f"{prefix}.ctx.b2"),
            bn_mode=bn_mode,
        )


def init_upsampler(store: ParameterStore, rng: np.random.Generator, model_dim: int, prefix: str = "up") -> None:
    g = ad.glorot_uniform
    dt = ad.default_dtype()
    store.add(f"{prefix}.conv.kernel", g(rng, (CONV_WIDTH, model_dim, CONV_DIM), CONV_WIDTH * model_dim, CONV_DIM))
    store.add(f"{prefix}.conv.bias", np.zeros(CONV_DIM, dt))
    store.add(f"{prefix}.bn.scale", np.ones(CONV_DIM, dt))
    store.add(f"{prefix}.bn.shift", np.zeros(CONV_DIM, dt))
    store.add(f"{prefix}.bn.running_mean", np.zeros(CONV_DIM, dt), trainable=False)
    store.add(f"{prefix}.bn.running_var", np.ones(CONV_DIM, dt), trainable=False)
    for name, (fi, fo) in {"attn.w1": (MLP_IN, ATTN_HIDDEN), "attn.w2": (ATTN_HIDDEN, ATTN_HIDDEN),
                           "attn.w3": (ATTN_HIDDEN, 1)}.items():
        store.add(f"{prefix}.{name}", g(rng, (fi, fo), fi, fo))
        store.add(f"{prefix}.{name[:-2]}b{name[-1]}", np.zeros(fo, dt))
    for name, (fi, fo) in {"ctx.w1": (MLP_IN, CONTEXT_DIM), "ctx.w2": (CONTEXT_DIM, CONTEXT_DIM)}.items():
        store.add(f"{prefix}.{name}", g(rng, (fi, fo), fi, fo))
        store.add(f"{prefix}.{name[:-2]}b{name[-1]}", np.zeros(fo, dt))
    store.add(f"{prefix}.proj", g(rng, (CONTEXT_DIM, model_dim), CONTEXT_DIM, model_dim))


def init_duration_predictor(store: ParameterStore, rng: np.random.Generator, model_dim: int, latent_dim: int,
                            conv_width: int = 3, prefix: str = "dur") -> None:
    fan_in = conv_width * (model_dim + latent_dim)
    store.add(f"{prefix}.conv.kernel", ad.glorot_uniform(rng, (conv_width, model_dim + latent_dim, model_dim), fan_in, model_dim))
    store.add(f"{prefix}.conv.bias", np.zeros(model_dim, ad.default_dtype()))
    store.add(f"{prefix}.proj.weight", ad.glorot_uniform(rng, (model_dim, 1), model_dim, 1))
    store.add(f"{prefix}.proj.bias", np.zeros(1, ad.default_dtype()))


# ---------------------------------------------------------------- operations

def predict_durations(H: Tensor, z: Tensor, store: ParameterStore, prefix: str = "dur") -> TokenSequence:
    """Token representations V and softplus-positive durations d from encoder outputs and latents."""
    if H.shape[0] == 0:
        raise ValueError("predict_durations: no tokens")
    if z.shape[0] != H.shape[0]:
        raise ValueError(f"latent has {z.shape[0]} rows for {H.shape[0]} tokens")
    x = ad.concat([H, z], axis=1)
    V = ad.swish(ad.conv1d(x, store.tensor(f"{prefix}.conv.kernel"), store.tensor(f"{prefix}.conv.bias")))
    logits = ad.dense(V, store.tensor(f"{prefix}.proj.weight"), store.tensor(f"{prefix}.proj.bias"))
    d = ad.softplus(ad.reshape(logits, (H.shape[0],)))
    return TokenSequence(V, d)


def duration_loss(d: Tensor, total_frames: int) -> Tensor:
    """|T - sum(d)| / K."""
    k = d.shape[0]
    if k == 0:
        raise ValueError("duration_loss: no tokens")
    if total_frames < 1:
        raise ValueError(f"duration_loss: T must be >= 1, got {total_frames}")
    return ad.mul(ad.absolute(ad.sub(float(total_frames), ad.tsum(d))), 1.0 / k)


def token_boundaries(d: Tensor) -> tuple[Tensor, Tensor]:
    """Running sums: e_k = d_1 + ... + d_k and s_k = e_{k-1}, so s_{k+1} == e_k exactly."""
    e = ad.cumsum(d)
    s = ad.concat([Tensor(np.zeros(1, dtype=d.dtype)), e[:-1]], axis=0)
    return s, e


def boundary_grids(s: Tensor, e: Tensor, total_frames: int) -> tuple[Tensor, Tensor]:
    """S[t, k] = t - s_k and E[t, k] = e_k - t for t = 0..T-1."""
    if total_frames < 1:
        raise ValueError(f"boundary_grids: T must be >= 1, got {total_frames}")
    t = np.arange(total_frames, dtype=s.dtype)[:, None]
    S = ad.sub(t, ad.reshape(s, (1, -1)))
    E = ad.sub(ad.reshape(e, (1, -1)), t)
    return S, E


def token_features(V: Tensor, params: UpsamplerParams) -> Tensor:
    """Conv1D over tokens -> batch norm -> Swish, giving a (K, 8) summary."""
    h = ad.conv1d(V, params.conv_kernel, params.conv_bias)
    h = ad.batch_norm(h, params.bn_scale, params.bn_shift, params.bn_running, mode=params.bn_mode)
    return ad.swish(h)


def _mlp_inputs(S: Tensor, E: Tensor, feats: Tensor) -> Tensor:
    T, K = S.shape
    per_cell = ad.broadcast_to(ad.reshape(feats, (1, K, CONV_DIM)), (T, K, CONV_DIM))
    return ad.concat([ad.reshape(S, (T, K, 1)), ad.reshape(E, (T, K, 1)), per_cell], axis=2)


def attention_weights(S: Tensor, E: Tensor, V: Tensor, params: UpsamplerParams, feats: Tensor | None = None) -> Tensor:
    if S.shape != E.shape or S.shape[1] != V.shape[0]:
        raise ValueError(f"inconsistent shapes S={S.shape} E={E.shape} V={V.shape}")
    feats = token_features(V, params) if feats is None else feats
    x = _mlp_inputs(S, E, feats)
    h = ad.swish(ad.dense(x, params.w1, params.b1))
    h = ad.swish(ad.dense(h, params.w2, params.b2))
    logits = ad.dense(h, params.w3, params.b3)
    return ad.softmax(ad.reshape(logits, S.shape), axis=1)


def aux_context(S: Tensor, E: Tensor, V: Tensor, params: UpsamplerParams, feats: Tensor | None = None) -> Tensor:
    if S.shape != E.shape or S.shape[1] != V.shape[0]:
        raise ValueError(f"inconsistent shapes S={S.shape} E={E.shape} V={V.shape}")
    feats = token_features(V, params) if feats is None else feats
    x = _mlp_inputs(S, E, feats)
    h = ad.swish(ad.dense(x, params.c1, params.cb1))
    return ad.swish(ad.dense(h, params.c2, params.cb2))


def upsample(W: Tensor, V: Tensor, C: Tensor, A: Tensor) -> Tensor:
    """O = W V + einsum('tk,tkp->tp', W, C) A."""
    T, K = W.shape
    if V.shape[0] != K or C.shape[:2] != (T, K) or A.shape != (C.shape[2], V.shape[1]):
        raise ValueError(f"upsample shape mismatch: W={W.shape} V={V.shape} C={C.shape} A={A.shape}")
    return ad.add(ad.matmul(W, V), ad.matmul(ad.einsum("tk,tkp->tp", W, C), A))


def align(seq: TokenSequence, total_frames: int, params: UpsamplerParams, A: Tensor) -> AlignmentBundle:
    """Run boundaries -> grids -> W, C -> upsampled frames for one utterance."""
    s, e = token_boundaries(seq.d)
    S, E = boundary_grids(s, e, total_frames)
    feats = token_features(seq.V, params)
    W = attention_weights(S, E, seq.V, params, feats)
    C = aux_context(S, E, seq.V, params, feats)
    return AlignmentBundle(s, e, S, E, W, C, upsample(W, seq.V, C, A))


def inferred_frame_count(d) -> int:
    """max(1, round-half-up(sum(d)))."""
    total = float(np.sum(d.data if isinstance(d, Tensor) else d))
    return max(1, int(math.floor(total + 0.5)))


def length_regulator(V: np.ndarray, durations) -> np.ndarray:
    """Repeat each token row ``durations[k]`` times (integer durations)."""
    return np.repeat(np.asarray(V), np.asarray(durations, dtype=np.int64), axis=0)


def indicator_attention(durations, total_frames: int | None = None) -> np.ndarray:
    """Hard T x K attention with W[t, k] = 1 iff frame t falls in [s_k, e_k)."""
    durations = np.asarray(durations, dtype=np.int64)
    owner = np.repeat(np.arange(durations.size), durations)
    T = owner.size if total_frames is None else total_frames
    W = np.zeros((T, durations.size))
    W[np.arange(min(T, owner.size)), owner[:T]] = 1.0
    return W
