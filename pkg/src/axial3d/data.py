"""Synthetic nodule volumes, rotation augmentation, scaling, folds and AXV1 files.

Benign nodules are smooth ellipsoids; malignant ones carry radial spikes and
a rough boundary, so shape rather than intensity separates the classes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .streams import stream
from .tensor_core import ShapeError

VOLUME_SIDE = 32
NOISE_SIGMA = 0.05


class FormatError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Sample:
    volume: np.ndarray  # float32, (Z, W, H)
    label: int
    nodule_id: int

    def __post_init__(self):
        self.volume = np.ascontiguousarray(self.volume, dtype=np.float32)
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not np.all(np.isfinite(self.volume)):
            raise ValueError("volume contains non-finite values")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _nodule(rng: np.random.Generator, malignant: bool, side: int = VOLUME_SIDE) -> np.ndarray:
    radii = np.clip(rng.uniform(3.0, 12.0) * rng.uniform(0.8, 1.2, size=3), 3.0, 12.0)
    center = (side - 1) / 2.0 + rng.uniform(-2.0, 2.0, size=3)
    rot = _random_rotation(rng)
    grid = np.stack(np.meshgrid(*(np.arange(side, dtype=np.float64),) * 3, indexing="ij"), axis=-1)
    local = (grid - center) @ rot  # coordinates in the ellipsoid frame
    scaled = local / radii
    rho = np.linalg.norm(scaled, axis=-1)
    direction = scaled / np.maximum(rho, 1e-9)[..., None]

    boundary = np.ones_like(rho)
    if malignant:
        n_spikes = int(rng.integers(4, 11))
        tips = _unit_vectors(rng, n_spikes)
        heights = rng.uniform(0.8, 1.6, size=n_spikes)
        widths = rng.uniform(0.15, 0.3, size=n_spikes)
        cosang = np.clip(direction @ tips.T, -1.0, 1.0)
        ang = np.arccos(cosang)
        boundary += np.sum(heights * np.exp(-((ang / widths) ** 2)), axis=-1)
        bumps = _unit_vectors(rng, 12)
        amp = rng.uniform(-0.12, 0.12, size=12)
        boundary += np.sum(amp * np.exp(-(((np.arccos(np.clip(direction @ bumps.T, -1, 1))) / 0.35) ** 2)), axis=-1)

    # soft edge about half a voxel wide, measured in voxels along the ray
    scale = np.linalg.norm(local, axis=-1) / np.maximum(rho, 1e-9)
    edge = np.clip((boundary - rho) * scale + 0.5, 0.0, 1.0)
    gradient = 1.0 + 0.15 * (local @ _unit_vectors(rng, 1)[0]) / radii.max()
    vol = edge * gradient + rng.normal(0.0, NOISE_SIGMA, size=rho.shape)
    return vol.astype(np.float32)


def synth_generate(n_benign: int, n_malignant: int, seed: int) -> list[Sample]:
    """Benign samples get ids ``0..n_benign-1``, malignant ones follow.

    Each nodule draws from its own stream keyed by (seed, nodule_id), so the
    set is reproducible and can be generated in any order.
    """
    if n_benign < 0 or n_malignant < 0:
        raise ValueError("counts must be non-negative")
    out = []
    for nid in range(n_benign + n_malignant):
        malignant = nid >= n_benign
        rng = stream(seed, "synth", nid)
        out.append(Sample(_nodule(rng, malignant), int(malignant), nid))
    return out


# ---------------------------------------------------------------------------
# augmentation, scaling, splitting
# ---------------------------------------------------------------------------

# rotation planes of the (z, w, h) volume for rotations about each axis
_ROTATION_PLANES = {"x": (0, 1), "y": (0, 2), "z": (1, 2)}


def rotate(volume: np.ndarray, axis: str, quarter_turns: int) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(volume, quarter_turns, axes=_ROTATION_PLANES[axis]))


def augment_rotations(s: Sample) -> list[Sample]:
    """Identity plus 90/180/270 degree turns about x, y and z: 10 copies."""
    v = s.volume
    if v.ndim != 3 or len(set(v.shape)) != 1:
        raise ShapeError(f"rotation needs a cubic volume, got {v.shape}")
    copies = [Sample(v.copy(), s.label, s.nodule_id)]
    for axis in ("x", "y", "z"):
        for k in (1, 2, 3):
            copies.append(Sample(rotate(v, axis, k), s.label, s.nodule_id))
    return copies


def standard_scale(train_samples: Sequence[Sample], apply_to: Iterable[Sample] = ()):
    """Fit mean/std on training voxels, then scale both sets.

    Returns ``(scaled_train, scaled_other, (mean, std))``; scaled volumes are
    float64 arrays.
    """
    if not train_samples:
        raise ConfigError("training set is empty")
    mean, std = fit_scaler(train_samples)
    scale = lambda s: (s.volume.astype(np.float64) - mean) / std  # noqa: E731
    return [scale(s) for s in train_samples], [scale(s) for s in apply_to], (mean, std)


def fit_scaler(train_samples: Sequence[Sample]) -> tuple[float, float]:
    n = 0
    total = 0.0
    for s in train_samples:
        v = s.volume.astype(np.float64)
        total += v.sum()
        n += v.size
    mean = total / n
    sq = sum(float(np.sum((s.volume.astype(np.float64) - mean) ** 2)) for s in train_samples)
    std = float(np.sqrt(sq / n))
    if std == 0.0:
        raise DegenerateDataError("training voxels have zero variance")
    return float(mean), std


def kfold_split(samples: Sequence[Sample], k: int = 10, seed: int = 0) -> dict[int, int]:
    """Stratified nodule-level folds: ``nodule_id -> fold``.

    Nodules of each class are shuffled and dealt round-robin, continuing the
    deal across classes so fold sizes stay within one of each other.
    """
    labels: dict[int, int] = {}
    for s in samples:
        if labels.setdefault(s.nodule_id, s.label) != s.label:
            raise ConfigError(f"nodule {s.nodule_id} has conflicting labels")
    if len(labels) < k:
        raise ConfigError(f"need at least {k} distinct nodules, got {len(labels)}")
    rng = stream(seed, "split")
    folds = {}
    slot = 0
    for label in (0, 1):
        ids = np.array(sorted(n for n, lab in labels.items() if lab == label), dtype=np.int64)
        for nid in rng.permutation(ids):
            folds[int(nid)] = slot % k
            slot += 1
    return folds


# ---------------------------------------------------------------------------
# AXV1 files and manifests
# ---------------------------------------------------------------------------

AXV1_MAGIC = b"AXV1"
_HEADER = struct.Struct("<4sIIIIB")
_MAX_VOXELS = 1 << 28


def write_volume(s: Sample, path) -> None:
    z, w, h = s.volume.shape
    header = _HEADER.pack(AXV1_MAGIC, z, w, h, s.nodule_id, s.label)
    Path(path).write_bytes(header + s.volume.astype("<f4").tobytes())


def read_volume(path) -> Sample:
    buf = Path(path).read_bytes()
    if buf[:4] != AXV1_MAGIC:
        raise FormatError(f"{path}: offset 0: bad magic {buf[:4]!r}, expected 'AXV1'")
    if len(buf) < _HEADER.size:
        raise FormatError(
            f"{path}: offset {len(buf)}: header needs {_HEADER.size} bytes, file has {len(buf)}"
        )
    _, z, w, h, nid, label = _HEADER.unpack_from(buf)
    n = z * w * h
    if n == 0 or n > _MAX_VOXELS:
        raise FormatError(f"{path}: offset 4: dimensions {z}x{w}x{h} out of range")
    if label not in (0, 1):
        raise FormatError(f"{path}: offset 20: label byte {label} is not 0 or 1")
    expected = _HEADER.size + 4 * n
    if len(buf) != expected:
        raise FormatError(
            f"{path}: offset {_HEADER.size}: payload expected {4 * n} bytes, "
            f"got {len(buf) - _HEADER.size}"
        )
    vol = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(z, w, h)
    return Sample(vol.astype(np.float32), int(label), int(nid))


def write_manifest(entries: Iterable[tuple[str, int]], path) -> None:
    Path(path).write_text("".join(f"{p}\t{fold}\n" for p, fold in entries))


def read_manifest(path) -> list[tuple[Path, int]]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            name, fold = line.rsplit("\t", 1)
            out.append((path.parent / name, int(fold)))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected '<path>\\t<fold>'") from None
    return out


def sample_uid(s: Sample, copy_index: int) -> int:
    """Stable per-copy id used to key dropout streams."""
    return s.nodule_id * 16 + copy_index
