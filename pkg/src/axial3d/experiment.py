"""End-to-end desk-scale run: synthesize, augment, split, scale, train, evaluate."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data
from . import network as net
from .evalbench import Metrics, evaluate
from .training import Dataset, Schedule, TrainResult, predict, train


def expand(samples: Sequence[data.Sample]) -> list[tuple[data.Sample, int]]:
    """All rotated copies, each paired with its stable sample uid."""
    out = []
    for s in samples:
        for i, c in enumerate(data.augment_rotations(s)):
            out.append((c, data.sample_uid(s, i)))
    return out


def fold_datasets(copies: Sequence[tuple[data.Sample, int]], folds: dict[int, int], held_out: int):
    """Split copies by nodule fold, fit the scaler on training voxels only."""
    train_c = [(s, u) for s, u in copies if folds[s.nodule_id] != held_out]
    test_c = [(s, u) for s, u in copies if folds[s.nodule_id] == held_out]
    mean, std = data.fit_scaler([s for s, _ in train_c])

    def to_dataset(items):
        x = np.empty((len(items), 1) + items[0][0].volume.shape) if items else np.zeros((0, 1, 1, 1, 1))
        for i, (s, _) in enumerate(items):
            x[i, 0] = (s.volume.astype(np.float64) - mean) / std
        return Dataset(x, [s.label for s, _ in items], [u for _, u in items])

    return to_dataset(train_c), to_dataset(test_c), (mean, std)


@dataclass
class ExperimentResult:
    train: TrainResult
    metrics: Metrics
    seconds: float
    scaler: tuple[float, float]


def run_experiment(n_benign: int = 50, n_malignant: int = 50, seed: int = 0, fold: int = 0,
                   schedule: Schedule | None = None, d_sizes: Sequence[int] = net.DEFAULT_D_SIZES,
                   ckpt_dir: str | Path | None = None,
                   on_epoch: Callable[[str], None] | None = None) -> ExperimentResult:
    start = time.perf_counter()
    schedule = schedule or Schedule()
    samples = data.synth_generate(n_benign, n_malignant, seed)
    folds = data.kfold_split(samples, 10, seed)
    trainset, testset, scaler = fold_datasets(expand(samples), folds, fold)
    model = net.build_model(d_sizes, seed)
    extra = {"data.mean": np.array(scaler[0]), "data.std": np.array(scaler[1])}
    result = train(model, trainset, schedule, seed, val=testset, ckpt_dir=ckpt_dir,
                   extra_tensors=extra, on_epoch=on_epoch)
    metrics = evaluate(predict(model, testset.x), testset.y)
    return ExperimentResult(result, metrics, time.perf_counter() - start, scaler)
