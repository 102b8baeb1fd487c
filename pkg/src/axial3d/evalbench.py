"""Classification metrics, the attention cost model and the MAC benchmark."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import attention as att
from . import tensor_core as tc
from .tensor_core import ShapeError


@dataclass
class Metrics:
    """Table-style metrics; ``None`` marks an undefined value (zero denominator
    or a single-class label set) and is never silently reported as 0."""

    auc: float | None
    accuracy: float
    precision: float | None
    sensitivity: float | None

    @property
    def auc_defined(self) -> bool:
        return self.auc is not None

    @property
    def precision_defined(self) -> bool:
        return self.precision is not None

    @property
    def sensitivity_defined(self) -> bool:
        return self.sensitivity is not None

    def line(self) -> str:
        def fmt(v):
            return "undef" if v is None else f"{v:.4f}"
        return (f"AUC={fmt(self.auc)} ACC={fmt(self.accuracy)} "
                f"PREC={fmt(self.precision)} SENS={fmt(self.sensitivity)}")


def _check_pair(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores vs {y.size} labels")
    return s, y.astype(bool)


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with half credit for ties; ``None`` if one class is absent."""
    s, y = _check_pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_metrics(scores, labels, threshold: float = 0.5):
    """``(accuracy, precision, sensitivity)`` at ``score >= threshold``."""
    s, y = _check_pair(scores, labels)
    if s.size == 0:
        raise ShapeError("no samples")
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    accuracy = float(np.mean(pred == y))
    precision = tp / (tp + fp) if tp + fp else None
    sensitivity = tp / (tp + fn) if tp + fn else None
    return accuracy, precision, sensitivity


def evaluate(scores, labels, threshold: float = 0.5) -> Metrics:
    acc, prec, sens = confusion_metrics(scores, labels, threshold)
    return Metrics(auc(scores, labels), acc, prec, sens)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

@dataclass
class CostReport:
    shape: tuple[int, int, int]
    nonlocal_nominal: int
    axial_nominal: int
    nonlocal_measured: int | None = None
    axial_measured: int | None = None

    @property
    def n(self) -> int:
        z, w, h = self.shape
        return z * w * h

    @property
    def savings_fraction(self) -> float:
        return 1.0 - self.axial_nominal / self.nonlocal_nominal

    @property
    def measured_savings_fraction(self) -> float | None:
        if not self.nonlocal_measured or self.axial_measured is None:
            return None
        return 1.0 - self.axial_measured / self.nonlocal_measured


def cost_model(z: int, w: int, h: int) -> CostReport:
    """Nominal attention costs: N^2 for full attention, floor(N^1.5) for axial.

    For non-cubic volumes the axial figure is N^1.5 scaled by
    (Z^2 + W^2 + H^2) / (3 N^(2/3)), which reduces to N^1.5 when Z = W = H.
    """
    if min(z, w, h) <= 0:
        raise ShapeError("dimensions must be positive")
    n = z * w * h
    if z == w == h:
        axial = math.isqrt(n ** 3)
    else:
        axial = math.floor(n ** 1.5 * (z * z + w * w + h * h) / (3.0 * n ** (2.0 / 3.0)))
    return CostReport((z, w, h), n * n, axial)


def _random_embedding(shape, d, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(d,) + tuple(shape))


def _run_attention(kind: str, h: np.ndarray) -> np.ndarray:
    if kind == "nonlocal":
        flat = h.reshape(h.shape[0], -1)
        out, _ = att.nonlocal_attend(flat, flat, flat)
        return out
    if kind == "axial":
        t, _ = att.axial_stages_cl(np.moveaxis(h, 0, -1)[None])
        return t
    raise ValueError(f"unknown layer kind {kind!r}")


def measured_cost(layer_kind: str, shape: Sequence[int], d: int) -> int:
    """Counted MACs of the attention proper (embedding excluded) for one volume."""
    h = _random_embedding(shape, d)
    with tc.count_macs() as counter:
        _run_attention(layer_kind, h)
    return counter.macs


BENCH_COLUMNS = (
    "Z", "W", "H", "N", "nonlocal_nominal", "axial_nominal", "nonlocal_macs",
    "axial_macs", "savings", "time_nonlocal_ms", "time_axial_ms",
)


def bench(shapes: Iterable[Sequence[int]], d: int = 8) -> list[str]:
    """Tab-separated rows (header first), sorted by N ascending.

    The two time columns are wall-clock and machine-dependent.
    """
    rows = [("\t".join(BENCH_COLUMNS))]
    for shape in sorted((tuple(int(v) for v in s) for s in shapes), key=lambda s: (s[0] * s[1] * s[2], s)):
        report = cost_model(*shape)
        h = _random_embedding(shape, d)
        timings = {}
        for kind in ("nonlocal", "axial"):
            start = time.perf_counter()
            with tc.count_macs() as counter:
                _run_attention(kind, h)
            timings[kind] = (time.perf_counter() - start) * 1e3
            setattr(report, f"{kind}_measured", counter.macs)
        rows.append("\t".join(str(v) for v in (
            *shape, report.n, report.nonlocal_nominal, report.axial_nominal,
            report.nonlocal_measured, report.axial_measured,
            f"{report.savings_fraction:.6f}",
            f"{timings['nonlocal']:.3f}", f"{timings['axial']:.3f}",
        )))
    return rows
