import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from axial3d import data
from axial3d import evalbench as eb
from axial3d.tensor_core import ShapeError


@pytest.fixture(scope="module")
def small_set():
    return data.synth_generate(6, 6, seed=3)


def test_empty_generation():
    assert data.synth_generate(0, 0, seed=1) == []


def test_generation_is_deterministic(small_set):
    again = data.synth_generate(6, 6, seed=3)
    for a, b in zip(small_set, again):
        assert np.array_equal(a.volume, b.volume)
        assert (a.label, a.nodule_id) == (b.label, b.nodule_id)
    other = data.synth_generate(6, 6, seed=4)
    assert not np.array_equal(small_set[0].volume, other[0].volume)


def test_generation_layout(small_set):
    assert [s.label for s in small_set] == [0] * 6 + [1] * 6
    assert [s.nodule_id for s in small_set] == list(range(12))
    for s in small_set:
        assert s.volume.shape == (32, 32, 32)
        assert s.volume.dtype == np.float32
        assert np.all(np.isfinite(s.volume))


def roughness(volume):
    """Variance of boundary radius over directions, relative to the mean radius squared."""
    mask = ndimage.binary_opening(volume > 0.5, iterations=1)
    labels, n = ndimage.label(mask)
    if n > 1:
        sizes = ndimage.sum(mask, labels, range(1, n + 1))
        mask = labels == (1 + int(np.argmax(sizes)))
    shell = mask & ~ndimage.binary_erosion(mask)
    pts = np.argwhere(shell).astype(float)
    r = np.linalg.norm(pts - np.argwhere(mask).mean(axis=0), axis=1)
    return r.var() / r.mean() ** 2


def test_classes_separable_by_boundary_roughness():
    samples = data.synth_generate(100, 100, seed=11)
    scores = [roughness(s.volume) for s in samples]
    assert eb.auc(scores, [s.label for s in samples]) >= 0.9


# -- rotations --------------------------------------------------------------------------------

def test_rotations_of_constant_volume():
    s = data.Sample(np.full((4, 4, 4), 2.5), 1, 7)
    copies = data.augment_rotations(s)
    assert len(copies) == 10
    assert all(np.array_equal(c.volume, s.volume) for c in copies)
    assert {(c.label, c.nodule_id) for c in copies} == {(1, 7)}


def test_rotation_group_laws(small_set):
    v = small_set[7].volume
    for axis in ("x", "y", "z"):
        r = v
        for _ in range(4):
            r = data.rotate(r, axis, 1)
        assert np.array_equal(r, v)
        assert np.array_equal(data.rotate(v, axis, 2), data.rotate(data.rotate(v, axis, 1), axis, 1))


def test_rotated_copies_distinct_and_preserve_values(small_set):
    s = small_set[8]
    copies = data.augment_rotations(s)
    ref = np.sort(s.volume, axis=None)
    for c in copies:
        assert np.array_equal(np.sort(c.volume, axis=None), ref)
    flat = {c.volume.tobytes() for c in copies}
    assert len(flat) == 10


def test_rotation_needs_cube():
    with pytest.raises(ShapeError):
        data.augment_rotations(data.Sample(np.zeros((2, 3, 3)), 0, 0))


# -- scaling ------------------------------------------------------------------------------------

def test_scaling_identity_on_standardized_data():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((2, 4, 4, 4))
    v = (v - v.mean()) / v.std()
    train = [data.Sample(x, 0, i) for i, x in enumerate(v)]
    # float32 storage limits how close to the identity this can get
    scaled, _, (mean, std) = data.standard_scale(train)
    for a, s in zip(scaled, train):
        assert np.max(np.abs(a - s.volume)) <= 1e-6


def test_scaled_train_has_zero_mean_unit_std(small_set):
    scaled, other, (mean, std) = data.standard_scale(small_set[:8], small_set[8:])
    allv = np.concatenate([a.ravel() for a in scaled])
    assert abs(allv.mean()) <= 1e-9
    assert abs(allv.std() - 1.0) <= 1e-9
    assert len(other) == 4


def test_scaler_ignores_test_bytes(small_set):
    _, _, fit_a = data.standard_scale(small_set[:8], small_set[8:])
    noisy = [data.Sample(s.volume * 100 + 5, s.label, s.nodule_id) for s in small_set[8:]]
    _, _, fit_b = data.standard_scale(small_set[:8], noisy)
    assert fit_a == fit_b


def test_constant_data_is_degenerate():
    with pytest.raises(data.DegenerateDataError):
        data.standard_scale([data.Sample(np.ones((2, 2, 2)), 0, 0)])


# -- folds ---------------------------------------------------------------------------------------------

def fake(n_benign, n_malignant):
    return [data.Sample(np.zeros((1, 1, 1)), int(i >= n_benign), i) for i in range(n_benign + n_malignant)]


def test_ten_nodules_one_per_fold():
    folds = data.kfold_split(fake(5, 5), 10, seed=0)
    assert sorted(folds.values()) == list(range(10))


def test_hundred_nodules_exact_stratification():
    samples = fake(50, 50)
    folds = data.kfold_split(samples, 10, seed=2)
    for k in range(10):
        labels = [s.label for s in samples if folds[s.nodule_id] == k]
        assert labels.count(0) == 5 and labels.count(1) == 5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 1000))
def test_folds_partition_and_stratify(nb, nm, seed):
    samples = fake(nb, nm)
    if nb + nm < 10:
        with pytest.raises(data.ConfigError):
            data.kfold_split(samples, 10, seed)
        return
    folds = data.kfold_split(samples, 10, seed)
    assert set(folds) == set(range(nb + nm))
    assert set(folds.values()) <= set(range(10))
    for label, total in ((0, nb), (1, nm)):
        counts = [sum(1 for s in samples if s.label == label and folds[s.nodule_id] == k) for k in range(10)]
        assert max(counts) - min(counts) <= 1
        assert sum(counts) == total


def test_augmented_copies_share_fold(small_set):
    copies = [c for s in small_set for c in data.augment_rotations(s)]
    folds = data.kfold_split(copies, 10, seed=0)
    assert set(folds) == {s.nodule_id for s in small_set}
    by_fold = {}
    for c in copies:
        by_fold.setdefault(c.nodule_id, set()).add(folds[c.nodule_id])
    assert all(len(v) == 1 for v in by_fold.values())


# -- files -------------------------------------------------------------------------------------------------

def test_volume_round_trip(tmp_path, small_set):
    for s in small_set[:3] + small_set[-2:]:
        path = tmp_path / f"{s.nodule_id}.axv"
        data.write_volume(s, path)
        back = data.read_volume(path)
        assert np.array_equal(back.volume, s.volume)
        assert (back.label, back.nodule_id) == (s.label, s.nodule_id)
        assert path.stat().st_size == 21 + 4 * 32 ** 3


def test_volume_format_errors(tmp_path, small_set):
    path = tmp_path / "v.axv"
    data.write_volume(small_set[0], path)
    raw = path.read_bytes()
    (tmp_path / "magic.axv").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(data.FormatError, match="AXV1"):
        data.read_volume(tmp_path / "magic.axv")
    (tmp_path / "short.axv").write_bytes(raw[:-8])
    with pytest.raises(data.FormatError, match=f"expected {4 * 32 ** 3} bytes, got {4 * 32 ** 3 - 8}"):
        data.read_volume(tmp_path / "short.axv")
    huge = bytearray(raw)
    huge[4:8] = (1 << 31).to_bytes(4, "little")
    (tmp_path / "huge.axv").write_bytes(bytes(huge))
    with pytest.raises(data.FormatError, match="offset"):
        data.read_volume(tmp_path / "huge.axv")


def test_manifest_round_trip(tmp_path):
    data.write_manifest([("a.axv", 3), ("b.axv", 0)], tmp_path / "m.tsv")
    assert data.read_manifest(tmp_path / "m.tsv") == [(tmp_path / "a.axv", 3), (tmp_path / "b.axv", 0)]
