"""
Synthetic nodules
=================

Smooth benign ellipsoids and spiky malignant ones, rotated copies, a
nodule-level fold split and the AXV1 file format.
"""
import tempfile
from pathlib import Path

import numpy as np

from axial3d import data

samples = data.synth_generate(n_benign=10, n_malignant=10, seed=0)
for s in (samples[0], samples[-1]):
    inside = s.volume > 0.5
    print(f"nodule {s.nodule_id:2d} label {s.label}: {inside.sum():5d} voxels above 0.5")

# Ten copies per nodule: the original plus three quarter turns about each axis.
copies = data.augment_rotations(samples[3])
print("copies:", len(copies), "same values:",
      all(np.array_equal(np.sort(c.volume, None), np.sort(copies[0].volume, None)) for c in copies))

# Folds are assigned per nodule, so rotated twins never straddle train and test.
folds = data.kfold_split(samples, k=10, seed=0)
for k in range(3):
    members = [s for s in samples if folds[s.nodule_id] == k]
    print(f"fold {k}: nodules {[s.nodule_id for s in members]} labels {[s.label for s in members]}")

# Scaling statistics come from the training voxels only.
train = [s for s in samples if folds[s.nodule_id] != 0]
test = [s for s in samples if folds[s.nodule_id] == 0]
_, scaled_test, (mean, std) = data.standard_scale(train, test)
print(f"train mean {mean:.4f} std {std:.4f}; test mean after scaling {np.mean(scaled_test):.4f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "n.axv"
    data.write_volume(samples[0], path)
    back = data.read_volume(path)
    print("AXV1 round trip:", np.array_equal(back.volume, samples[0].volume), path.stat().st_size, "bytes")
