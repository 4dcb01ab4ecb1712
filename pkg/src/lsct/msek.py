"""Channel-graph attention over latent channels (the MSEK block).

Each of the ``d`` channels of ``z_v`` is a node whose feature is the
``(b, n)`` slice at that channel. One round of masked multi-head attention
over first-order neighbours mixes channels; heads are averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

__all__ = ["ChannelGraph", "MsekParams", "build_graph", "edge_coeffs", "neighbor_softmax",
           "msek_forward", "init_msek"]


@dataclass
class ChannelGraph:
    adjacency: np.ndarray
    rng_seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {a.shape}")
        if not a.diagonal().all():
            raise ValueError("adjacency must contain every self-loop")
        self.adjacency = a

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    def off_diagonal_density(self) -> float:
        d = self.node_count
        if d == 1:
            return 0.0
        return float((self.adjacency.sum() - d) / (d * (d - 1)))


@dataclass
class MsekParams:
    weights: T.Tensor  # (K, n, n); head k projects node features as W^k h

    @property
    def heads(self) -> int:
        return self.weights.shape[0]


def build_graph(d: int, seed: int) -> ChannelGraph:
    """Fully connected graph with each off-diagonal edge dropped independently w.p. 1/2."""
    if d < 1:
        raise ValueError(f"graph needs at least one node, got d={d}")
    rng = np.random.default_rng(seed)
    adj = rng.uniform(size=(d, d)) >= 0.5
    np.fill_diagonal(adj, True)
    return ChannelGraph(adj, seed)


def init_msek(n: int, heads: int, seed: int) -> MsekParams:
    bound = 1.0 / math.sqrt(n)
    w = np.random.default_rng(seed).uniform(-bound, bound, size=(heads, n, n))
    return MsekParams(T.Tensor(w, requires_grad=True, name="msek.W"))


def _project(h: T.Tensor, W: T.Tensor) -> T.Tensor:
    # h: (..., d, n) rows are node features; returns rows (W h_i)^T
    return T.matmul(h, T.transpose_last2(W))


def edge_coeffs(h: T.Tensor, Wk: T.Tensor) -> T.Tensor:
    """Scaled dot products ``(W h_i) . (W h_j) / sqrt(n)`` for every node pair.

    ``h`` has node features on its last axis, shape ``(..., d, n)``; ``Wk`` is
    ``(n, n)`` or a stack ``(K, n, n)``. Returns ``(..., d, d)``.
    """
    n = h.shape[-1]
    if Wk.shape[-2:] != (n, n):
        raise ValueError(f"head weight {Wk.shape} incompatible with node feature length {n}")
    p = _project(h, Wk)
    return T.scale(T.matmul(p, T.transpose_last2(p)), 1.0 / math.sqrt(n))


def neighbor_softmax(e: T.Tensor, g: ChannelGraph) -> T.Tensor:
    """Row-wise softmax restricted to each node's neighbourhood; non-neighbours get exactly 0."""
    if not np.all(np.isfinite(e.data)):
        raise ValueError("edge coefficients must be finite")
    if e.shape[-1] != g.node_count or e.shape[-2] != g.node_count:
        raise ValueError(f"coefficients {e.shape} do not match a {g.node_count}-node graph")
    assert g.adjacency.any(axis=1).all(), "every node needs a neighbour"
    return T.masked_softmax_lastdim(e, g.adjacency)


def msek_forward(z_v: T.Tensor, g: ChannelGraph, p: MsekParams) -> T.Tensor:
    """Aggregate ``z_v`` (b, n, d) over the channel graph; returns ``z_g`` of the same shape."""
    b, n, d = z_v.shape
    if d != g.node_count:
        raise ValueError(f"latent has {d} channels but graph has {g.node_count} nodes")
    if p.weights.shape[1:] != (n, n):
        raise ValueError(f"head weights {p.weights.shape} do not match bottleneck length {n}")
    h = T.reshape(T.transpose_last2(z_v), (b, 1, d, n))   # one row per channel, broadcast over heads
    proj = _project(h, p.weights)                          # (b, K, d, n)
    e = T.scale(T.matmul(proj, T.transpose_last2(proj)), 1.0 / math.sqrt(n))
    alpha = neighbor_softmax(e, g)                         # (b, K, d, d)
    heads = T.matmul(alpha, proj)                          # (b, K, d, n)
    out = T.mean(heads, axis=1)                            # (b, d, n)
    return T.transpose_last2(out)
