"""Codebook lookups: soft cross-attention (CAM) and the nearest-neighbour VQ baseline."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T

__all__ = ["init_codebook", "cam_attend", "cam_weights", "nn_quantize", "BETA"]

BETA = 0.25


def init_codebook(m: int, d: int, seed: int) -> T.Tensor:
    """``m x d`` trainable bases drawn i.i.d. from U(-1/sqrt(d), 1/sqrt(d))."""
    if m < 1 or d < 1:
        raise ValueError(f"codebook needs m >= 1 and d >= 1, got m={m}, d={d}")
    bound = 1.0 / math.sqrt(d)
    rng = np.random.default_rng(seed)
    data = rng.uniform(-bound, bound, size=(m, d))
    return T.Tensor(data, requires_grad=True, name="codebook")


def _check_dims(z_q: T.Tensor, M: T.Tensor) -> None:
    if z_q.shape[-1] != M.shape[-1]:
        raise ValueError(f"latent dim {z_q.shape[-1]} does not match codebook dim {M.shape[-1]}")


def cam_weights(z_q: T.Tensor, M: T.Tensor) -> T.Tensor:
    """Attention of every latent token over all bases, shape (..., m)."""
    _check_dims(z_q, M)
    logits = T.scale(T.matmul(z_q, T.transpose_last2(M)), 1.0 / math.sqrt(M.shape[-1]))
    return T.softmax_lastdim(logits)


def cam_attend(z_q: T.Tensor, M: T.Tensor) -> T.Tensor:
    """``softmax(z_q M^T / sqrt(d)) M``: gradients reach both the queries and the codebook."""
    return T.matmul(cam_weights(z_q, M), M)


def nn_quantize(z_q: T.Tensor, M: T.Tensor, beta: float = BETA):
    """Hard nearest-basis assignment with a straight-through gradient.

    Returns ``(z_v, indices, aux_loss)``. ``aux_loss`` is the usual VQ-VAE
    codebook + commitment term, each a mean of squared differences. Ties go
    to the lowest basis index.
    """
    _check_dims(z_q, M)
    flat = z_q.data.reshape(-1, z_q.shape[-1])
    d2 = (flat**2).sum(axis=1, keepdims=True) - 2.0 * flat @ M.data.T + (M.data**2).sum(axis=1)[None, :]
    idx = np.argmin(d2, axis=1)  # argmin returns the first minimum
    indices = idx.reshape(z_q.shape[:-1])
    chosen = T.take_rows(M, indices)
    diff = T.sub(T.detach(z_q), chosen)
    codebook_term = T.mean(T.mul(diff, diff))
    commit = T.sub(z_q, T.detach(chosen))
    aux = T.add(codebook_term, T.scale(T.mean(T.mul(commit, commit)), beta))
    z_v = T.add(z_q, T.detach(T.sub(chosen, z_q)))
    return z_v, indices, aux
