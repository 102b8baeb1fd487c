"""
A short training run
====================

The full 32^3 model needs close to an hour per desk-scale run on one core.
Here the same loop trains a two-layer axial model on volumes max-pooled to
8^3, which takes well under a minute.
"""
import numpy as np

from axial3d import data
from axial3d import network as net
from axial3d.evalbench import evaluate
from axial3d.training import Dataset, Schedule, predict, train

samples = data.synth_generate(30, 30, seed=0)
folds = data.kfold_split(samples, 10, seed=0)


def shrink(s):
    return net.max_pool_3d(s.volume[None].astype(np.float64), (4, 4, 4), 4)[0]


def build(held_out, train_side):
    items = [(s, i, c) for s in samples if (folds[s.nodule_id] in held_out) != train_side
             for i, c in enumerate(data.augment_rotations(s))]
    x = np.stack([shrink(c) for _, _, c in items])[:, None]
    return Dataset(x, [c.label for _, _, c in items], [data.sample_uid(s, i) for s, i, _ in items])


trainset = build({0, 1}, True)
testset = build({0, 1}, False)
mean, std = trainset.x.mean(), trainset.x.std()
trainset.x = (trainset.x - mean) / std
testset.x = (testset.x - mean) / std

specs = [net.LayerSpec("axial", d=4), net.LayerSpec("axial", d=4),
         net.LayerSpec("maxpool", kernel=(2, 2, 2), stride=2),
         net.LayerSpec("fc", in_features=4 * 4 * 4 * 4, dropout_p=0.5)]
model = net.Model(specs, input_shape=(1, 8, 8, 8), rng_seed=0)

print("epoch  lr  loss  train_acc  val_acc  val_auc")
train(model, trainset, Schedule([(6, 1e-2), (4, 1e-3)], batch_size=16), seed=0,
      val=testset, on_epoch=print)
print(evaluate(predict(model, testset.x), testset.y).line())
