"""Gradients, finite-difference verification and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import network as net
from .data import ConfigError
from .evalbench import auc as auc_score
from .optim import OptimizerState, adam_step, bce_grad, bce_loss
from .streams import stream
from .tensor_core import ShapeError

log = logging.getLogger(__name__)

FC_WEIGHT_DECAY = 1e-4


class NumericError(FloatingPointError):
    pass


def _first_bad_layer(model: net.Model, batch: np.ndarray) -> str:
    trace = []
    t = np.ascontiguousarray(np.moveaxis(np.asarray(batch, dtype=np.float64), 1, -1))
    for i, spec in enumerate(model.specs[:-1]):
        if spec.kind == "axial":
            t, _ = net.att.axial_layer_forward_cl(t, model.layers[i])
        else:
            t, _ = net.max_pool_cl(t, spec.stride)
        trace.append(f"layer {i} ({spec.kind})")
        if not np.all(np.isfinite(t)):
            return trace[-1]
    return f"layer {len(model.specs) - 1} (fc)"


def backward(model: net.Model, batch, labels, masks: np.ndarray | None = None,
             loss_scale: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE loss and its gradient for every parameter.

    Dropout is active only when ``masks`` is given; the masks are held fixed so
    the loss is a deterministic function of the parameters.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (np.shape(batch)[0],):
        raise ShapeError(f"{labels.shape} labels for a batch of {np.shape(batch)[0]}")
    mode = "train" if masks is not None else "eval"
    probs, cache = net.forward(model, batch, mode=mode, masks=masks, return_cache=True)
    loss = loss_scale * bce_loss(probs, labels)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss; first non-finite output at {_first_bad_layer(model, batch)}")
    grads = net.backward_from_probs(model, cache, loss_scale * bce_grad(probs, labels))
    return loss, grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    worst: list[tuple[str, tuple[int, ...], float, float, float]]
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        lines = [f"max relative error {self.max_rel_error:.3e} (tol {self.tolerance:g})"]
        for name, idx, ga, gf, rel in self.worst:
            lines.append(f"  {name}{list(idx)}: analytic {ga:+.6e} fd {gf:+.6e} rel {rel:.3e}")
        return "\n".join(lines)


def grad_check(model: net.Model, batch, labels, eps: float = 1e-5,
               masks: np.ndarray | None = None, params: Sequence[str] | None = None,
               n_worst: int = 5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences, coordinate by coordinate."""
    _, grads = backward(model, batch, labels, masks)
    names = list(params) if params is not None else list(model.params)
    entries = []
    per_param = {}
    for name in names:
        theta = model.params[name]
        g = grads[name]
        worst_here = 0.0
        for idx in np.ndindex(theta.shape):
            old = theta[idx]
            theta[idx] = old + eps
            lp, _ = _loss_only(model, batch, labels, masks)
            theta[idx] = old - eps
            lm, _ = _loss_only(model, batch, labels, masks)
            theta[idx] = old
            fd = (lp - lm) / (2 * eps)
            ga = float(g[idx])
            rel = abs(ga - fd) / max(1e-8, abs(ga) + abs(fd))
            entries.append((name, idx, ga, fd, rel))
            worst_here = max(worst_here, rel)
        per_param[name] = worst_here
    entries.sort(key=lambda e: -e[4])
    return GradCheckReport(
        max_rel_error=entries[0][4] if entries else 0.0,
        per_param=per_param,
        worst=entries[:n_worst],
        tolerance=tolerance,
    )


def _loss_only(model, batch, labels, masks):
    mode = "train" if masks is not None else "eval"
    probs = net.forward(model, batch, mode=mode, masks=masks)
    return bce_loss(probs, np.asarray(labels, dtype=np.float64)), probs


# ---------------------------------------------------------------------------
# schedule and loop
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    phases: list[tuple[int, float]] = field(default_factory=lambda: [(20, 1e-3), (40, 1e-4)])
    batch_size: int = 64

    def __post_init__(self):
        self.phases = [(int(e), float(lr)) for e, lr in self.phases]
        if not self.phases or any(e <= 0 for e, _ in self.phases):
            raise ConfigError("every phase needs a positive epoch count")
        if any(lr < 0 for _, lr in self.phases):
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")

    @property
    def epochs(self) -> int:
        return sum(e for e, _ in self.phases)


@dataclass
class Dataset:
    """Stacked volumes ``(n, 1, Z, W, H)`` with labels and stable sample ids."""

    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.x) == len(self.y) == len(self.ids)):
            raise ShapeError("x, y and ids must have the same length")

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class TrainResult:
    model: net.Model
    log_lines: list[str]
    step_losses: list[float]
    checkpoints: list[Path]


def format_log_line(epoch, lr, loss, train_acc, val_acc, val_auc) -> str:
    return "\t".join([str(epoch)] + [f"{v:.6f}" for v in (lr, loss, train_acc, val_acc, val_auc)])


def predict(model: net.Model, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = [net.forward(model, x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def train(model: net.Model, dataset: Dataset, schedule: Schedule, seed: int,
          val: Dataset | None = None, ckpt_dir: str | Path | None = None,
          extra_tensors: dict[str, np.ndarray] | None = None,
          on_epoch: Callable[[str], None] | None = None) -> TrainResult:
    """Run the phased schedule with shuffled mini-batches; the model is updated in place.

    Batch order comes from the ``shuffle`` stream keyed by epoch, dropout masks
    from per-sample streams, so results do not depend on anything but ``seed``.
    """
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    if not np.all(np.isin(dataset.y, (0.0, 1.0))):
        raise ConfigError("labels must be 0 or 1")
    state = OptimizerState(weight_decay={"fc.weight": FC_WEIGHT_DECAY})

    log_lines: list[str] = []
    step_losses: list[float] = []
    ckpts: list[Path] = []
    epoch = 0
    for phase, (n_epochs, lr) in enumerate(schedule.phases, start=1):
        state.lr = lr
        for _ in range(n_epochs):
            epoch += 1
            order = stream(seed, "shuffle", epoch).permutation(len(dataset))
            tot_loss = 0.0
            correct = 0
            for s in range(0, len(order), schedule.batch_size):
                idx = np.sort(order[s:s + schedule.batch_size])
                xb, yb = dataset.x[idx], dataset.y[idx]
                masks = None
                if model.dropout_p > 0.0:
                    masks = net.sample_dropout_masks(model, dataset.ids[idx], epoch)
                probs, cache = net.forward(model, xb, mode="train", masks=masks, return_cache=True)
                loss = bce_loss(probs, yb)
                if not np.isfinite(loss):
                    raise NumericError(
                        f"epoch {epoch}: non-finite loss; first non-finite output at "
                        f"{_first_bad_layer(model, xb)}"
                    )
                grads = net.backward_from_probs(model, cache, bce_grad(probs, yb))
                adam_step(state, model.params, grads)
                step_losses.append(loss)
                tot_loss += loss * len(idx)
                correct += int(np.sum((probs >= 0.5) == (yb == 1.0)))
            val_acc = val_auc = float("nan")
            if val is not None and len(val):
                p = predict(model, val.x)
                val_acc = float(np.mean((p >= 0.5) == (val.y == 1.0)))
                val_auc = auc_score(p, val.y)
                val_auc = float("nan") if val_auc is None else val_auc
            line = format_log_line(epoch, lr, tot_loss / len(dataset), correct / len(dataset),
                                   val_acc, val_auc)
            log_lines.append(line)
            log.info(line)
            if on_epoch is not None:
                on_epoch(line)
        if ckpt_dir is not None:
            ckpts.append(_write_ckpt(model, ckpt_dir, f"phase{phase}.axck", extra_tensors))
    if ckpt_dir is not None:
        ckpts.append(_write_ckpt(model, ckpt_dir, "final.axck", extra_tensors))
    return TrainResult(model, log_lines, step_losses, ckpts)


def _write_ckpt(model, ckpt_dir, name, extra):
    path = Path(ckpt_dir) / name
    tensors = dict(model.params)
    if extra:
        tensors.update(extra)
    net.save_checkpoint(path, tensors)
    return path
