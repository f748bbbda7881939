"""Temporal patching and random-Fourier-feature tokens.

A patch q of length P maps to [cos(Wq + b); sin(Wq + b)]. Target-column
patches add V m, where m flags positions the model cannot see (horizon,
masked history, tail padding).
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad


def n_patches(length, P):
    return math.ceil(length / P)


def patch(series, P):
    """Split ``series`` into ceil(len/P) patches of length P, zero-padding the tail."""
    if P < 1:
        raise ValueError(f"patch length must be >= 1, got {P}")
    series = np.asarray(series, dtype=np.float64)
    S = n_patches(len(series), P)
    out = np.zeros(S * P)
    out[: len(series)] = series
    return out.reshape(S, P)


def unpatch(patches, length):
    return np.asarray(patches).reshape(-1)[:length]


def init_params(rng, P, D, prefix="tok"):
    if D % 2:
        raise ValueError(f"embedding dim D={D} must be even")
    std = 1.0 / math.sqrt(P)
    return {
        f"{prefix}.W": rng.normal(0.0, std, size=(D // 2, P)),
        f"{prefix}.b": rng.normal(0.0, std, size=(D // 2,)),
        f"{prefix}.V": np.zeros((D, P)),
    }


def rff_encode(q, W, b):
    """Fourier features of patches ``q`` (..., P) -> (..., D)."""
    phi = ad.add(ad.matmul(q, ad.transpose(W)), b)
    return ad.concat([ad.cos(phi), ad.sin(phi)], axis=-1)


def encode_target_patch(q, m, W, b, V):
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] != W.shape[1]:
        raise ad.ShapeError(f"mask length {m.shape[-1]} != patch length {W.shape[1]}")
    return ad.add(rff_encode(q, W, b), ad.matmul(ad.Tensor(m), ad.transpose(V)))


def patchify(values, mask, P):
    """Batch layout ``values`` (B, C1, L, V), ``mask`` (B, C1, L).

    Returns patches (B, C1, S, V, P) and the target indicator (B, C1, S, V, P),
    which is zero on covariate slots. Padded tail positions count as unknown.
    """
    B, C1, L, V = values.shape
    S = n_patches(L, P)
    vals = np.zeros((B, C1, S * P, V))
    vals[:, :, :L] = values
    m = np.ones((B, C1, S * P))
    m[:, :, :L] = mask
    q = vals.reshape(B, C1, S, P, V).transpose(0, 1, 2, 4, 3)
    ind = np.zeros((B, C1, S, V, P))
    ind[:, :, :, V - 1, :] = m.reshape(B, C1, S, P)
    return np.ascontiguousarray(q), ind


def tokenize_arrays(values, mask, P, W, b, V):
    """Token tensor (B, C1, S, M+1, D) for already-normalized episode arrays."""
    q, ind = patchify(values, mask, P)
    e = rff_encode(ad.Tensor(q), W, b)
    return ad.add(e, ad.matmul(ad.Tensor(ind), ad.transpose(V)))


def tokenize(episode, params, prefix="tok"):
    """Tokens (C+1, S, M+1, D) for a single episode with numpy parameters."""
    W, b, V = (ad.Tensor(params[f"{prefix}.{k}"]) for k in "WbV")
    P = W.shape[1]
    tok = tokenize_arrays(episode.values[None], episode.mask[None], P, W, b, V)
    return tok.data[0]
