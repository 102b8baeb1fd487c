"""Self-check suite behind ``axial3d verify``."""
from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from . import attention as att
from . import data
from . import evalbench as eb
from . import network as net
from . import oracles
from .training import grad_check


def _random_layer(rng, c, d, z, w, h, pos_scale=0.5):
    return att.AxialLayerParams(
        embed=att.EmbeddingWeights(rng.uniform(-1, 1, (d, c))),
        pos=att.PositionalVectors(rng.uniform(-pos_scale, pos_scale, (d, z)),
                                  rng.uniform(-pos_scale, pos_scale, (d, w)),
                                  rng.uniform(-pos_scale, pos_scale, (d, h))),
        norm_gain=rng.uniform(0.5, 1.5, c),
        norm_bias=rng.uniform(-0.5, 0.5, c),
    )


def check_axis_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        t = rng.uniform(-1.5, 1.5, size=tuple(rng.integers(1, 6, size=4)))
        worst = max(worst, float(np.max(np.abs(att.axis_attention(t) - oracles.naive_axis_attention(t)))))
    return worst <= 1e-10, f"max abs err {worst:.2e}"


def check_degenerate_nonlocal() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    worst = 0.0
    for z in (1, 2, 5, 7):
        p = _random_layer(rng, 3, 2, z, 1, 1)
        x = rng.standard_normal((3, z, 1, 1))
        axial = att.axial_attention_3d(x, p, residual=False)
        n = att.layer_norm(x, p.norm_gain, p.norm_bias)
        full = att.nonlocal_full(n, p.embed, shared=True, positional=att.build_positional_encoding(p.pos))
        worst = max(worst, float(np.max(np.abs(axial - full))))
    return worst <= 1e-10, f"max abs err {worst:.2e}"


def check_gradients() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    specs = [net.LayerSpec("axial", d=2), net.LayerSpec("fc", in_features=16, dropout_p=0.5)]
    model = net.Model(specs, (1, 2, 2, 2), rng_seed=3)
    for v in model.params.values():
        v[...] = rng.uniform(-1, 1, v.shape)
    x = rng.standard_normal((2, 1, 2, 2, 2))
    report = grad_check(model, x, [1.0, 0.0], eps=1e-5)
    return report.passed, f"max rel err {report.max_rel_error:.2e}"


def check_cost_constants() -> tuple[bool, str]:
    r = eb.cost_model(32, 32, 32)
    ok = r.nonlocal_nominal == 1_073_741_824 and r.axial_nominal == 5_931_641 and r.savings_fraction > 0.994
    return ok, f"nonlocal {r.nonlocal_nominal:,} axial {r.axial_nominal:,} savings {r.savings_fraction:.4%}"


def check_measured_scaling() -> tuple[bool, str]:
    counts = [eb.measured_cost("nonlocal", (n, n, n), 4) for n in (4, 8, 16)]
    ratios = [b / a for a, b in zip(counts, counts[1:])]
    axial16 = eb.measured_cost("axial", (16, 16, 16), 4)
    ok = all(abs(r - 64.0) <= 0.64 for r in ratios) and axial16 / counts[-1] <= 1 / 50
    return ok, f"ratios {ratios[0]:.2f}, {ratios[1]:.2f}; axial/nonlocal at 16^3 {axial16 / counts[-1]:.4f}"


def check_data_invariants() -> tuple[bool, str]:
    samples = data.synth_generate(6, 6, seed=5)
    v = samples[0].volume
    rot_ok = np.array_equal(data.rotate(data.rotate(data.rotate(data.rotate(v, "z", 1), "z", 1), "z", 1), "z", 1), v)
    rot_ok &= np.array_equal(data.rotate(v, "x", 2), data.rotate(data.rotate(v, "x", 1), "x", 1))
    copies = [c for s in samples for c in data.augment_rotations(s)]
    folds = data.kfold_split(copies, 10, seed=5)
    split_ok = set(folds) == {s.nodule_id for s in samples}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "s.axv"
        data.write_volume(samples[3], path)
        back = data.read_volume(path)
    io_ok = (np.array_equal(back.volume, samples[3].volume) and back.label == samples[3].label
             and back.nodule_id == samples[3].nodule_id)
    return bool(rot_ok and split_ok and io_ok), f"rotations {rot_ok} folds {split_ok} axv1 {io_ok}"


def check_metrics() -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 21))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = rng.integers(0, 5, n) / 4.0
        worst = max(worst, abs(eb.auc(s, y) - oracles.brute_force_auc(s, y)))
    return worst <= 1e-12, f"max auc err {worst:.1e}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("axis attention vs per-fiber loop", check_axis_oracle),
    ("axial (W=H=1) vs full non-local", check_degenerate_nonlocal),
    ("gradient check, one-layer model", check_gradients),
    ("published cost constants", check_cost_constants),
    ("measured MAC scaling", check_measured_scaling),
    ("data invariants", check_data_invariants),
    ("AUC vs brute force", check_metrics),
]


def run_checks(emit: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        emit(f"{'PASS' if ok else 'FAIL'}\t{name}\t{detail}")
    return all_ok
