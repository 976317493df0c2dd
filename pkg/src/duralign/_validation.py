"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np


def check_token_ids(ids, vocab_size: int | None = None) -> np.ndarray:
    """1-D non-empty integer array of token ids, optionally bounded by ``vocab_size``."""
    arr = np.asarray(ids)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"expected a non-empty 1-D token id sequence, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError("token ids must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 0 or (vocab_size is not None and arr.max() >= vocab_size):
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    return arr


def check_token_sequences(X, vocab_size: int | None = None) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 1 and np.issubdtype(X.dtype, np.integer):
        raise ValueError("expected a collection of token sequences, got a single sequence")
    seqs = [check_token_ids(x, vocab_size) for x in X]
    if not seqs:
        raise ValueError("no token sequences given")
    return seqs


def check_spectrogram(y, feature_dim: int | None = None) -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty (frames, features) array, got shape {arr.shape}")
    if feature_dim is not None and arr.shape[1] != feature_dim:
        raise ValueError(f"expected {feature_dim} features per frame, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("spectrogram contains non-finite values")
    return arr


def check_paired(X, y, vocab_size: int | None = None, feature_dim: int | None = None):
    seqs = check_token_sequences(X, vocab_size)
    specs = [check_spectrogram(t, feature_dim) for t in y]
    if len(seqs) != len(specs):
        raise ValueError(f"{len(seqs)} token sequences but {len(specs)} spectrograms")
    return seqs, specs
