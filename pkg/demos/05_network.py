"""
The classifier
==============

Six axial layers, two max pools and a sigmoid head on 32^3 volumes.
"""
import time

import numpy as np

from axial3d import network as net

model = net.build_model(seed=0)
print("parameters:", model.n_params)

trace = []
start = time.perf_counter()
p = net.forward(model, np.zeros((1, 1, 32, 32, 32)), trace=trace)
print(f"one forward pass: {time.perf_counter() - start:.2f} s")
for spec, shape in zip(model.specs, trace):
    print(f"  {spec.kind:8s} -> {' x '.join(map(str, shape))}")
print("probability for an empty volume:", p[0])

# Parameters go to disk in the AXCK format and come back bit for bit.
import tempfile
from pathlib import Path

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "init.axck"
    net.save_checkpoint(path, model.params)
    again = net.model_from_tensors(net.load_checkpoint(path))
    print("checkpoint round trip:", all(np.array_equal(again.params[k], v) for k, v in model.params.items()))
