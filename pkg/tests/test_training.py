#!/usr/bin/env python3

"""Tests for losses, ray sampling, Adam, schedules and the fit loop"""

import time

import numpy as np
import pytest
from scipy.stats import chi2

import training
from conftest import flat_burst, pack, randomize, tiny_config, tiny_scene, unpack
from data import bilinear_read
from diffcore import RowGradient, Tensor, check_gradients, densify, evaluate_with_gradients, mean, precision
from layers import composite_rays
from training import (AdamState, FitAborted, FitConfig, _chunk_loss, adam_step, alpha_regularizer, fit,
                      gradient_loss, gradient_radius, init_scene, learning_rate, perturb_batch, photometric_loss,
                      resolve_config, sample_batch)
from utils import UsageError


# ---------------------------------------------------------------- losses

def test_photometric_loss_values():
    c = np.full((4, 3), 0.3)
    assert photometric_loss(c, c, 1e-3).item() == 0.0
    assert photometric_loss(np.ones((1, 1)), np.full((1, 1), 0.5), 1e-3).item() == pytest.approx(0.5 / 1.001, rel=1e-6)


def test_photometric_loss_gradient_sign():
    with precision(np.float64):
        _, grads = evaluate_with_gradients(lambda leaves: photometric_loss(np.ones((1, 1)), leaves['c_hat'], 1e-3),
                                           {'c_hat': np.full((1, 1), 0.5)})
    assert grads['c_hat'][0, 0] == pytest.approx(-1.0 / 1.001, rel=1e-12)


@pytest.mark.parametrize("mode,alpha,expected", [
    ('magnitude', 0.0, 0.0),
    ('segmentation', 0.0, 0.0),
    ('segmentation', 0.5, 0.25),
    ('magnitude', 0.5, 0.5),
    ('segmentation', 1.0, 0.0),
])
def test_alpha_regularizer(mode, alpha, expected):
    assert alpha_regularizer(Tensor(np.full((5, 1), alpha)), mode).item() == pytest.approx(expected)


def test_alpha_regularizer_unknown_mode():
    with pytest.raises(ValueError, match="unknown alpha mode"):
        alpha_regularizer(Tensor(np.zeros((2, 1))), 'entropy')


def test_gradient_loss_cases():
    rng = np.random.default_rng(0)
    c, c_p = rng.uniform(0, 1, (6, 3)), rng.uniform(0, 1, (6, 3))
    with precision(np.float64):
        assert gradient_loss(c, c_p, Tensor(c), Tensor(c_p), 1e-3).item() == pytest.approx(0.0, abs=1e-20)
        # zero radius: partner is the ray itself
        assert gradient_loss(c, c, Tensor(c_p), Tensor(c_p), 1e-3).item() == 0.0
        flat = np.full((6, 3), 0.4)
        c_hat, c_hat_p = rng.uniform(0, 1, (6, 3)), rng.uniform(0, 1, (6, 3))
        value = gradient_loss(flat, flat, Tensor(c_hat), Tensor(c_hat_p), 1e-3).item()
    assert value == pytest.approx(np.mean((c_hat - c_hat_p) ** 2) / 1e-6, rel=1e-9)


# ---------------------------------------------------------------- sampling

def test_sample_batch_is_seeded(burst):
    a = sample_batch(burst, 100, np.random.default_rng(3))
    b = sample_batch(burst, 100, np.random.default_rng(3))
    for key in a:
        np.testing.assert_array_equal(a[key], b[key])
    assert a['c'].shape == (100, 3)
    np.testing.assert_array_equal(a['t'], burst.timestamps[a['frame']])


def test_sample_batch_balances_frames():
    burst = flat_burst(frame_count=42, width=4, height=3)
    k = 200
    batch = sample_batch(burst, 42 * k, np.random.default_rng(11))
    counts = np.bincount(batch['frame'], minlength=42)
    statistic = np.sum((counts - k) ** 2 / k)
    assert statistic < chi2.ppf(0.999, df=41)


def test_pixel_centers_read_stored_pixels(burst):
    x, y = np.array([0, 3, 7]), np.array([0, 2, 5])
    u, v = (x + 0.5) / burst.width, (y + 0.5) / burst.height
    frame = np.array([0, 1, 3])
    np.testing.assert_allclose(bilinear_read(burst.frames, frame, u, v), burst.frames[frame, y, x], atol=1e-7)


def test_sample_batch_errors(burst):
    with pytest.raises(ValueError, match="batch size"):
        sample_batch(burst, 0, np.random.default_rng(0))


def test_zero_radius_partner_matches(burst):
    batch = sample_batch(burst, 20, np.random.default_rng(0))
    partner = perturb_batch(burst, batch, 0.0, np.random.default_rng(1))
    np.testing.assert_array_equal(partner['u'], batch['u'])
    np.testing.assert_array_equal(partner['c'], batch['c'])


def test_partner_offset_is_radius_pixels():
    burst = flat_burst(width=100, height=80)
    batch = sample_batch(burst, 50, np.random.default_rng(0))
    batch['u'] = np.full(50, 0.5)
    batch['v'] = np.full(50, 0.5)
    partner = perturb_batch(burst, batch, 2.0, np.random.default_rng(1))
    offsets = np.hypot((partner['u'] - 0.5) * 100, (partner['v'] - 0.5) * 80)
    np.testing.assert_allclose(offsets, 2.0, rtol=1e-9)


# ---------------------------------------------------------------- Adam and schedules

def test_adam_zero_gradient_keeps_params():
    params = {'w': np.array([0.5, -1.0])}
    updated = adam_step(params, {'w': np.zeros(2)}, AdamState(), 0.01)
    np.testing.assert_array_equal(updated['w'], params['w'])


def test_adam_first_step_moves_by_lr():
    params = {'w': np.array([0.5, -1.0, 2.0])}
    updated = adam_step(params, {'w': np.array([3.0, -0.01, 1e-3])}, AdamState(), 0.01)
    np.testing.assert_allclose(updated['w'] - params['w'], [-0.01, 0.01, -0.01], rtol=1e-9)


def test_adam_constant_gradient_moves_monotonically():
    params, state = {'w': np.array([0.0])}, AdamState()
    path = [0.0]
    for _ in range(3):
        params = adam_step(params, {'w': np.array([2.0])}, state, 0.1)
        path.append(params['w'][0])
    assert all(b < a for a, b in zip(path, path[1:]))
    assert state.step == 3


def test_adam_prefix_scales():
    params = {'pose.translation': np.zeros(1), 'alpha.w0': np.zeros(1)}
    grads = {'pose.translation': np.ones(1), 'alpha.w0': np.ones(1)}
    updated = adam_step(params, grads, AdamState(), 0.01, {'pose.': 0.1})
    assert updated['pose.translation'][0] == pytest.approx(-0.001)
    assert updated['alpha.w0'][0] == pytest.approx(-0.01)


def test_adam_rejects_non_finite_gradient():
    params = {'alpha.w0': np.zeros(2), 'alpha.b0': np.zeros(2)}
    with pytest.raises(ValueError, match="'alpha.b0'"):
        adam_step(params, {'alpha.w0': np.ones(2), 'alpha.b0': np.array([1.0, np.inf])}, AdamState(), 0.01)


def test_adam_preserves_dtype():
    params = {'w': np.zeros(3, dtype=np.float32)}
    assert adam_step(params, {'w': np.ones(3, dtype=np.float32)}, AdamState(), 0.01)['w'].dtype == np.float32


def test_adam_row_gradient_updates_touched_rows_only():
    table = np.zeros((2, 4, 3), dtype=np.float32)
    grad = RowGradient(table.shape, [1, 6, 1], np.array([[1.0, -2.0, 0.0], [0.5, 0.5, 0.5], [1.0, 0.0, 0.0]]))
    state = AdamState()
    updated = adam_step({'t.grid': table}, {'t.grid': grad}, state, 0.01)['t.grid'].reshape(-1, 3)
    np.testing.assert_allclose(updated[1], [-0.01, 0.01, 0.0], atol=1e-7)
    np.testing.assert_allclose(updated[6], [-0.01, -0.01, -0.01], atol=1e-7)
    untouched = [r for r in range(8) if r not in (1, 6)]
    assert np.all(updated[untouched] == 0.0)
    assert np.all(table == 0.0)
    np.testing.assert_array_equal(state.row_steps['t.grid'], [0, 1, 0, 0, 0, 0, 1, 0])


def test_adam_row_bias_correction_counts_each_row():
    table = np.zeros((1, 3, 1), dtype=np.float32)
    state = AdamState()
    params = {'t.grid': table}
    params = adam_step(params, {'t.grid': RowGradient(table.shape, [0], [[1.0]])}, state, 0.01)
    params = adam_step(params, {'t.grid': RowGradient(table.shape, [2], [[1.0]])}, state, 0.01)
    # row 2 sees its first update at global step 2 and still moves by the full learning rate
    np.testing.assert_allclose(params['t.grid'][0, :, 0], [-0.01, 0.0, -0.01], atol=1e-7)


def test_adam_row_gradient_errors():
    table = np.zeros((2, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="non-finite"):
        adam_step({'g': table}, {'g': RowGradient(table.shape, [0], [[np.nan, 0.0, 0.0]])}, AdamState(), 0.01)
    with pytest.raises(ValueError, match="has shape"):
        adam_step({'g': table}, {'g': RowGradient((4, 3), [0], [[1.0, 0.0, 0.0]])}, AdamState(), 0.01)


def test_learning_rate_schedule():
    config = FitConfig(steps=101)
    assert learning_rate(0, config) == pytest.approx(3e-3)
    assert learning_rate(50, config) == pytest.approx(1.65e-3)
    assert learning_rate(100, config) == pytest.approx(3e-4)
    rates = [learning_rate(s, config) for s in range(101)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_gradient_radius_schedule():
    config = FitConfig(steps=100)
    assert gradient_radius(0, config) == pytest.approx(2.0)
    assert gradient_radius(20, config) == pytest.approx(1.125)
    assert gradient_radius(40, config) == pytest.approx(0.25)
    assert gradient_radius(99, config) == pytest.approx(0.25)


# ---------------------------------------------------------------- configuration

def test_preset_plane_depths():
    occlusion = resolve_config(FitConfig(preset='occlusion'))
    assert occlusion.depths == {'transmission': 1.0, 'obstruction': 0.5}
    assert occlusion.eta_alpha == 0.02
    assert occlusion.tau == 10.0
    reflection = resolve_config(FitConfig(preset='reflection'))
    assert reflection.depths['obstruction'] == 2.5 > reflection.depths['transmission']
    assert reflection.eta_alpha == 0.0
    assert resolve_config(FitConfig(preset='dehaze')).eta_alpha == -0.01
    segmentation = resolve_config(FitConfig(preset='segmentation'))
    assert segmentation.alpha_mode == 'segmentation'
    assert segmentation.flow_points == {'transmission': 15, 'obstruction': 15}
    fusion = resolve_config(FitConfig(preset='fusion'))
    assert 'obstruction' not in fusion.depths
    assert set(fusion.encodings) == {'transmission.flow', 'transmission.image'}


def test_encoding_sizes_and_overrides():
    config = resolve_config(FitConfig(preset='occlusion', encodings={'alpha': 'T'}, eta_alpha=0.5))
    assert config.encodings['transmission.image']['levels'] == 16
    assert config.encodings['transmission.image']['log2_table_size'] == 18
    assert config.encodings['alpha']['levels'] == 6
    assert config.eta_alpha == 0.5
    capped = resolve_config(FitConfig(preset='occlusion', max_log2_table=8))
    assert max(e['log2_table_size'] for e in capped.encodings.values()) == 8


@pytest.mark.parametrize("overrides,message", [
    (dict(preset='portrait'), "valid presets"),
    (dict(preset='fusion', depths={'obstruction': 0.5}), "no layer 'obstruction'"),
    (dict(depths={'obstruction': 1.0}), "must differ"),
    (dict(encodings={'depth': 'T'}), "no fields"),
    (dict(encodings={'alpha': {'levels': 0}}), "bad encoding"),
    (dict(encodings={'alpha': 'XL'}), "unknown encoding size"),
    (dict(alpha_mode='entropy'), "unknown alpha mode"),
    (dict(spline_mode='bezier'), "unknown spline mode"),
    (dict(steps=0), "steps"),
])
def test_config_errors(overrides, message):
    with pytest.raises(UsageError, match=message):
        resolve_config(FitConfig(**overrides))


def test_init_scene(burst):
    config = resolve_config(tiny_config('occlusion'))
    scene = init_scene(burst, config)
    assert scene.transmission.plane.depth == 1.0
    assert scene.obstruction.plane.depth == 0.5
    assert scene.params['alpha.b1'][0] == -2.0
    assert scene.params['transmission.flow.w1'].shape == (2, 8)
    assert np.all(scene.params['pose.translation'] == 0.0)
    assert scene.params['pose.translation'].shape == (4, 3)
    again = init_scene(burst, config)
    for name in scene.params:
        np.testing.assert_array_equal(scene.params[name], again.params[name])


# ---------------------------------------------------------------- fit loop

def _fit_params(config, burst):
    scene, trace = fit(burst, config)
    return scene.params, trace


def test_fit_trace_and_pose_sync(burst):
    scene, trace = fit(burst, tiny_config(steps=3))
    assert [row['step'] for row in trace] == [0, 2]
    assert set(trace[0]) == {'step', 'loss', 'photometric', 'alpha_reg', 'gradient'}
    assert trace[0]['loss'] == pytest.approx(trace[0]['photometric'] + 0.02 * trace[0]['alpha_reg'], rel=1e-5)
    assert scene.pose.translation is scene.params['pose.translation']


def test_fit_is_deterministic(burst):
    params_a, trace_a = _fit_params(tiny_config(steps=4), burst)
    params_b, trace_b = _fit_params(tiny_config(steps=4), burst)
    assert trace_a == trace_b
    for name in params_a:
        np.testing.assert_array_equal(params_a[name], params_b[name])


def test_threaded_fit_matches_serial(burst, monkeypatch):
    monkeypatch.setenv('NSF_THREADS', '4')
    params_a, trace_a = _fit_params(tiny_config(steps=3, deterministic=True), burst)
    params_b, trace_b = _fit_params(tiny_config(steps=3, deterministic=False), burst)
    assert trace_a == trace_b
    for name in params_a:
        np.testing.assert_array_equal(params_a[name], params_b[name])


def test_fit_with_gradient_loss(burst):
    _, trace = fit(burst, tiny_config(steps=2, gradient_loss=True))
    assert trace[0]['gradient'] > 0.0


def test_fit_single_layer(burst):
    scene, trace = fit(burst, tiny_config('fusion', steps=2))
    assert scene.obstruction is None
    assert trace[-1]['alpha_reg'] == 0.0


def test_fit_aborts_on_nan_loss(burst, monkeypatch):
    monkeypatch.setattr(training, 'photometric_loss', lambda c, c_hat, eps: mean(c_hat) * np.nan)
    with pytest.raises(FitAborted, match="step 0") as info:
        fit(burst, tiny_config(steps=3))
    assert info.value.step == 0


def test_every_parameter_receives_gradient(burst):
    config = resolve_config(tiny_config(hidden_width=8, tau=1.0))
    scene = init_scene(burst, config)
    batch = sample_batch(burst, 64, np.random.default_rng(0))
    active = {name: spec.encoding.levels for name, spec in scene.fields.items()}
    _, grads = _chunk_loss(scene, scene.params, config, active, 64, batch, None)
    dead = [name for name, g in grads.items() if not np.any(densify(g) != 0)]
    assert dead == []


def test_table_gradients_hold_only_read_rows(burst):
    config = resolve_config(tiny_config('fusion', hidden_width=8,
                                        encodings={'transmission.image': 'S', 'transmission.flow': 'T'}))
    scene = init_scene(burst, config)
    batch = sample_batch(burst, 16, np.random.default_rng(4))
    active = {name: spec.encoding.levels for name, spec in scene.fields.items()}
    _, grads = _chunk_loss(scene, scene.params, config, active, 16, batch, None)
    for name, spec in scene.fields.items():
        grad = grads[f"{name}.grid"]
        assert isinstance(grad, RowGradient)
        assert grad.shape == scene.params[f"{name}.grid"].shape
        assert len(grad.coalesce().rows) <= 16 * spec.encoding.levels * 4
    assert isinstance(grads['transmission.image.w0'], np.ndarray)


def test_full_size_tables_keep_steps_cheap():
    burst = flat_burst(frame_count=4, width=32, height=24)
    config = resolve_config(FitConfig(preset='fusion', steps=4, rays_per_step=2 ** 10, log_every=10))
    scene = init_scene(burst, config)
    started = time.perf_counter()
    fit(burst, config, scene)
    # an L table holds 16 * 2^18 rows; a step must cost what its rays read, not what the table holds
    assert (time.perf_counter() - started) / config.steps < 1.0


def test_toy_model_gradients():
    burst = flat_burst(frame_count=3, seed=9)
    scene = randomize(tiny_scene('occlusion', burst), seed=10)
    rng = np.random.default_rng(12)
    batch = sample_batch(burst, 4, rng)
    x0, layout = pack(scene.params)

    def loss(x):
        out = composite_rays(scene, unpack(x, layout), batch['u'], batch['v'], batch['t'])
        return photometric_loss(batch['c'], out['rgb'], 1e-3) + alpha_regularizer(out['alpha'], 'magnitude') * 0.02

    with precision(np.float64):
        _, grads = evaluate_with_gradients(lambda leaves: loss(leaves['x']), {'x': x0})
    significant = np.flatnonzero(np.abs(grads['x']) > 1e-4)
    picks = np.random.default_rng(13).choice(significant, size=min(24, len(significant)), replace=False)
    assert check_gradients(loss, x0, 1e-4, indices=picks) < 1e-3
