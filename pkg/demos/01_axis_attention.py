"""
Axial attention on a small volume
=================================

Attention along one axis at a time, checked against a plain loop, and the
three-stage layer checked against full attention on a volume that only
extends along depth.
"""
import numpy as np

from axial3d import attention as att
from axial3d import oracles

rng = np.random.default_rng(0)

# A D x Z x W x H embedding.  axis_attention mixes positions along the last
# axis only: every (z, w) pair owns an independent fiber of length H.
t = rng.standard_normal((4, 3, 5, 6))
fast = att.axis_attention(t)
slow = oracles.naive_axis_attention(t)
print("axis attention vs loop, max abs diff:", np.max(np.abs(fast - slow)))

# Each output is a convex mix of its fiber, so it stays inside the fiber's range.
print("inside fiber range:", bool(np.all(fast <= t.max(-1, keepdims=True) + 1e-12)))

# A full layer: LayerNorm, shared embedding plus positional vectors, then
# attention along H, W and Z in turn.
c, d, z = 3, 4, 7
layer = att.AxialLayerParams(
    embed=att.EmbeddingWeights(rng.uniform(-1, 1, (d, c))),
    pos=att.PositionalVectors(rng.uniform(-.5, .5, (d, z)), rng.uniform(-.5, .5, (d, 1)),
                              rng.uniform(-.5, .5, (d, 1))),
    norm_gain=np.ones(c),
    norm_bias=np.zeros(c),
)
x = rng.standard_normal((c, z, 1, 1))

# With W = H = 1 only the depth stage does anything, and it sees every voxel,
# so the layer must agree with full non-local attention.
axial = att.axial_attention_3d(x, layer, residual=False)
n = att.layer_norm(x, layer.norm_gain, layer.norm_bias)
full = att.nonlocal_full(n, layer.embed, shared=True,
                         positional=att.build_positional_encoding(layer.pos))
print("axial vs full attention (W=H=1), max abs diff:", np.max(np.abs(axial - full)))

# Positions matter: shuffle the depth axis and the output is no longer a
# shuffled copy of the original output.
perm = rng.permutation(z)
moved = att.axial_attention_3d(x[:, perm], layer, residual=False)
print("permutation gap with positional vectors:", np.max(np.abs(moved - axial[:, perm])))
