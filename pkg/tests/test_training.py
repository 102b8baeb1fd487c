import math

import numpy as np
import pytest

from axial3d import network as net
from axial3d import optim
from axial3d import training as tr
from axial3d.data import ConfigError
from axial3d.tensor_core import ShapeError


def tiny_model(seed=0, dropout_p=0.5, d=2):
    specs = [net.LayerSpec("axial", d=d), net.LayerSpec("fc", in_features=d * 8, dropout_p=dropout_p)]
    return net.Model(specs, (1, 2, 2, 2), seed)


def randomize(model, seed):
    rng = np.random.default_rng(seed)
    for v in model.params.values():
        v[...] = rng.uniform(-1, 1, v.shape)
    return model


# -- loss -----------------------------------------------------------------------------

def test_bce_examples():
    assert optim.bce_loss([1.0, 0.0], [1.0, 0.0]) <= 1e-10
    assert optim.bce_loss([0.5] * 4, [1, 0, 1, 1]) == pytest.approx(math.log(2), abs=1e-9)
    assert optim.bce_loss([math.exp(-1)], [1.0]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ShapeError):
        optim.bce_loss([0.5, 0.5], [1.0])


def test_bce_nonnegative_and_clamped():
    rng = np.random.default_rng(0)
    p = rng.uniform(0, 1, 200)
    y = rng.integers(0, 2, 200)
    assert optim.bce_loss(p, y) >= 0
    assert np.isfinite(optim.bce_loss([0.0, 1.0], [1.0, 0.0]))
    assert np.all(optim.bce_grad([0.0, 1.0], [1.0, 0.0]) == 0.0)


def test_bce_grad_matches_finite_difference():
    p = np.array([0.2, 0.7, 0.9])
    y = np.array([1.0, 0.0, 1.0])
    g = optim.bce_grad(p, y)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1e-6
        fd = (optim.bce_loss(p + e, y) - optim.bce_loss(p - e, y)) / 2e-6
        assert g[i] == pytest.approx(fd, rel=1e-6)


# -- gradients -------------------------------------------------------------------------------

def test_grad_check_covers_every_parameter_kind():
    model = randomize(tiny_model(), 1)
    x = np.random.default_rng(2).standard_normal((2, 1, 2, 2, 2))
    report = tr.grad_check(model, x, [1.0, 0.0])
    kinds = {k.split(".", 1)[1] for k in report.per_param}
    assert kinds == {"w_q", "r_z", "r_w", "r_h", "norm_gain", "norm_bias", "weight", "bias"}
    assert report.passed, str(report)


def test_grad_check_multichannel_residual_and_pooling():
    specs = [net.LayerSpec("axial", d=2), net.LayerSpec("axial", d=2),
             net.LayerSpec("maxpool", kernel=(2, 2, 2), stride=2),
             net.LayerSpec("fc", in_features=2 * 1 * 2 * 1, dropout_p=0.5)]
    model = randomize(net.Model(specs, (1, 2, 4, 2), 0), 3)
    x = np.random.default_rng(4).standard_normal((2, 1, 2, 4, 2))
    masks = net.sample_dropout_masks(model, [0, 1], epoch=1)
    report = tr.grad_check(model, x, [0.0, 1.0], masks=masks)
    assert report.passed, str(report)


def test_grad_check_linear_only_model():
    model = net.Model([net.LayerSpec("fc", in_features=8)], (1, 2, 2, 2), 0)
    x = np.random.default_rng(5).standard_normal((3, 1, 2, 2, 2))
    assert tr.grad_check(model, x, [1.0, 0.0, 1.0]).max_rel_error <= 1e-7


def test_grad_check_eval_and_fixed_mask_modes():
    model = randomize(tiny_model(), 6)
    x = np.random.default_rng(7).standard_normal((2, 1, 2, 2, 2))
    assert tr.grad_check(model, x, [1.0, 0.0]).passed
    masks = net.sample_dropout_masks(model, [3, 4], epoch=2)
    assert tr.grad_check(model, x, [1.0, 0.0], masks=masks).passed


def test_zero_gradient_on_flat_direction():
    # Channel 1 of the embedding is the constant r_h[1, 0] everywhere: it shifts
    # every score of a fiber by the same amount, which the softmax ignores, and
    # the head does not read channel 1.
    specs = [net.LayerSpec("axial", d=2), net.LayerSpec("fc", in_features=2 * 6, dropout_p=0.0)]
    model = randomize(net.Model(specs, (1, 2, 3, 1), 0), 8)
    p = model.params
    p["axial1.w_q"][1] = 0.0
    p["axial1.r_z"][1] = 0.0
    p["axial1.r_w"][1] = 0.0
    p["fc.weight"][0, 6:] = 0.0
    x = np.random.default_rng(9).standard_normal((3, 1, 2, 3, 1))
    _, grads = tr.backward(model, x, [1.0, 0.0, 1.0])
    assert abs(grads["axial1.r_h"][1, 0]) <= 1e-8
    assert abs(grads["axial1.r_h"][0, 0]) > 1e-6


def test_loss_scale_doubles_gradients():
    model = randomize(tiny_model(), 10)
    x = np.random.default_rng(11).standard_normal((2, 1, 2, 2, 2))
    l1, g1 = tr.backward(model, x, [1.0, 0.0])
    l2, g2 = tr.backward(model, x, [1.0, 0.0], loss_scale=2.0)
    assert l2 == pytest.approx(2 * l1, abs=1e-12)
    for k in g1:
        assert np.max(np.abs(g2[k] - 2 * g1[k])) <= 1e-10


def test_non_finite_loss_names_layer():
    model = tiny_model()
    model.params["axial1.w_q"][...] = np.nan
    with pytest.raises(tr.NumericError, match="layer 0"):
        tr.backward(model, np.ones((1, 1, 2, 2, 2)), [1.0])


# -- Adam -----------------------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    theta = {"a": np.array([0.3, -1.2])}
    state = optim.OptimizerState()
    optim.adam_step(state, theta, {"a": np.zeros(2)})
    assert np.array_equal(theta["a"], [0.3, -1.2])


def test_adam_first_step_closed_form():
    theta = {"a": np.array([0.0])}
    optim.adam_step(optim.OptimizerState(lr=0.001), theta, {"a": np.array([1.0])})
    assert theta["a"][0] == pytest.approx(-0.001, rel=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        optim.adam_step(optim.OptimizerState(), {"a": np.zeros(2)}, {"a": np.zeros(3)})


def test_weight_decay_touches_fc_weight_only():
    model = tiny_model(3)
    before = {k: v.copy() for k, v in model.params.items()}
    state = optim.OptimizerState(weight_decay={"fc.weight": tr.FC_WEIGHT_DECAY})
    optim.adam_step(state, model.params, {k: np.zeros_like(v) for k, v in model.params.items()})
    changed = {k for k in before if not np.array_equal(before[k], model.params[k])}
    assert changed == {"fc.weight"}


def test_step_invariant_to_order_within_batch():
    x = np.random.default_rng(12).standard_normal((4, 1, 2, 2, 2))
    y = np.array([1.0, 0.0, 0.0, 1.0])
    perm = [2, 0, 3, 1]
    results = []
    for xs, ys in ((x, y), (x[perm], y[perm])):
        model = randomize(tiny_model(dropout_p=0.0), 13)
        _, g = tr.backward(model, xs, ys)
        optim.adam_step(optim.OptimizerState(), model.params, g)
        results.append(model.params)
    for k in results[0]:
        assert np.allclose(results[0][k], results[1][k], rtol=0, atol=1e-12)


# -- init -------------------------------------------------------------------------------------------

def test_xavier_support_and_moments():
    a = math.sqrt(6 / (30 + 70))
    w = optim.xavier_init((100_000,), 30, 70, np.random.default_rng(14))
    assert np.all(np.abs(w) <= a)
    assert abs(w.mean()) <= 0.01 * a
    assert abs(w.var() - a * a / 3) <= 0.1 * a * a / 3
    again = optim.xavier_init((100_000,), 30, 70, np.random.default_rng(14))
    assert np.array_equal(w, again)


# -- loop ----------------------------------------------------------------------------------------------

def dataset(n=6, seed=15):
    rng = np.random.default_rng(seed)
    return tr.Dataset(rng.standard_normal((n, 1, 2, 2, 2)), rng.integers(0, 2, n), np.arange(n))


def test_schedule_validation():
    assert tr.Schedule().epochs == 60
    assert tr.Schedule().batch_size == 64
    with pytest.raises(ConfigError):
        tr.Schedule([(0, 1e-3)])
    with pytest.raises(ConfigError):
        tr.Schedule([(1, -1.0)])


def test_empty_dataset_is_config_error():
    empty = tr.Dataset(np.zeros((0, 1, 2, 2, 2)), [], [])
    with pytest.raises(ConfigError):
        tr.train(tiny_model(), empty, tr.Schedule([(1, 1e-3)], 2), seed=0)


def test_constant_inputs_loss_decreases_every_step():
    ds = tr.Dataset(np.full((10, 1, 2, 2, 2), 0.7), np.ones(10), np.arange(10))
    model = tiny_model(0, dropout_p=0.0)
    result = tr.train(model, ds, tr.Schedule([(1, 1e-2)], batch_size=1), seed=0)
    losses = result.step_losses
    assert len(losses) == 10
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_zero_lr_leaves_params_bitwise_unchanged():
    model = tiny_model(1)
    before = {k: v.copy() for k, v in model.params.items()}
    tr.train(model, dataset(), tr.Schedule([(2, 0.0), (1, 0.0)], 4), seed=1)
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_training_is_deterministic(tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        res = tr.train(tiny_model(2), dataset(), tr.Schedule([(2, 1e-2), (1, 1e-3)], 4), seed=3,
                       val=dataset(4, 16), ckpt_dir=out)
        runs.append((res, out))
    (a, da), (b, db) = runs
    assert a.log_lines == b.log_lines
    assert a.step_losses == b.step_losses
    assert [p.name for p in a.checkpoints] == ["phase1.axck", "phase2.axck", "final.axck"]
    for p in a.checkpoints:
        assert p.read_bytes() == (db / p.name).read_bytes()


def test_log_line_format():
    line = tr.format_log_line(3, 1e-3, 0.5, 0.75, 0.8, 0.9)
    assert line == "3\t0.001000\t0.500000\t0.750000\t0.800000\t0.900000"
    res = tr.train(tiny_model(4), dataset(), tr.Schedule([(1, 1e-3)], 4), seed=0, val=dataset(4, 17))
    fields = res.log_lines[0].split("\t")
    assert len(fields) == 6 and fields[0] == "1"
    assert all(len(f.split(".")[1]) == 6 for f in fields[1:])
