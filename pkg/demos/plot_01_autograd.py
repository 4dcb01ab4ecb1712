"""
Reverse-mode gradients on numpy arrays
======================================

Build a small expression, backpropagate, and compare against central
finite differences.
"""

# %%
import numpy as np

from lsct import tensor as T

rng = np.random.default_rng(0)
a = T.Tensor(rng.uniform(-1, 1, size=(2, 4, 3)), requires_grad=True)
b = T.Tensor(rng.uniform(-1, 1, size=(3, 5)), requires_grad=True)

loss = T.mean(T.softmax_lastdim(T.matmul(a, b)) * T.Tensor(rng.normal(size=(2, 4, 5))))
loss.backward()
print("loss", loss.item())
print("d loss / d b, first row:", b.grad[0])

# %%
# The graph is a topologically ordered list of tensors.
graph = T.Graph.from_root(loss)
print("nodes in graph:", len(graph.nodes))

# %%
# ``grad_check`` reports the worst relative mismatch over every input coordinate.
w = T.Tensor(rng.normal(size=(2, 4, 5)))
err = T.grad_check(lambda a, b: T.mean(T.softmax_lastdim(T.matmul(a, b)) * w), [a, b])
print(f"worst relative gradient error: {err:.2e}")
