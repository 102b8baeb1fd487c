"""
Checking the backward pass
==========================

Analytic gradients of a one-layer model against central differences,
first without dropout and then with a fixed dropout mask.
"""
import numpy as np

from axial3d import network as net
from axial3d.training import backward, grad_check

rng = np.random.default_rng(1)
specs = [net.LayerSpec("axial", d=2), net.LayerSpec("fc", in_features=2 * 8, dropout_p=0.5)]
model = net.Model(specs, input_shape=(1, 2, 2, 2), rng_seed=0)

# Random values everywhere, including the norm gain/bias that start at 1 and 0.
for v in model.params.values():
    v[...] = rng.uniform(-1, 1, v.shape)

x = rng.standard_normal((4, 1, 2, 2, 2))
y = np.array([1.0, 0.0, 0.0, 1.0])

loss, grads = backward(model, x, y)
print("loss:", loss)
print("gradient norms:", {k: round(float(np.linalg.norm(g)), 4) for k, g in grads.items()})

print(grad_check(model, x, y))

# Dropout is random, so finite differences need the mask held fixed.
masks = net.sample_dropout_masks(model, sample_ids=[0, 1, 2, 3], epoch=1)
print(grad_check(model, x, y, masks=masks))
