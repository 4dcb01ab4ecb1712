"""
Codebook attention, nearest-neighbour quantisation and the channel graph
========================================================================

Compare soft codebook attention with hard nearest-neighbour lookup, then
run one round of masked multi-head attention over the latent channels.
"""

# %%
import numpy as np

from lsct import tensor as T
from lsct.msek import build_graph, init_msek, msek_forward
from lsct.quantize import cam_attend, cam_weights, init_codebook, nn_quantize

rng = np.random.default_rng(0)
M = init_codebook(128, 64, seed=0)
z_q = T.Tensor(rng.normal(scale=0.1, size=(2, 8, 64)))

soft = cam_attend(z_q, M)
hard, idx, aux = nn_quantize(z_q, M)
w = cam_weights(z_q, M).data
print("attention rows sum to", w.sum(-1).min(), "..", w.sum(-1).max())
print("nearest bases of first segment:", idx[0])
print(f"NN-VQ auxiliary loss {aux.item():.4f}")

# %%
# Soft attention stays inside the convex hull of the codebook rows and is
# differentiable in both arguments; hard lookup needs the straight-through trick.
print("soft output range", soft.data.min(), soft.data.max())

# %%
graph = build_graph(64, seed=1)
print(f"channel graph off-diagonal density {graph.off_diagonal_density():.3f}")
params = init_msek(8, heads=8, seed=2)
z_g = msek_forward(soft, graph, params)
print("MSEK output", z_g.shape)
