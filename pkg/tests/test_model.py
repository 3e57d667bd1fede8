import numpy as np
import pytest

from motionforecast import kindata as kd
from motionforecast import model as mdl
from motionforecast import rotmath as rm
from motionforecast.kindata import NEUTRAL_STATE


def _config(n_modes=3, d_hidden=8, classes=(0, 1, 2, 1, 2)):
    return mdl.ModelConfig(classes=list(classes), d_hidden=d_hidden, n_modes=n_modes)


def _history(rng, n_frames=5, n_nodes=5):
    frames = rm.random_quat(rng, (n_frames, n_nodes))
    return kd.states_from_frames(frames)


def test_forecast_is_deterministic(rng):
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(7))
    x = _history(rng)
    a = model.predict_distribution(x, 6)
    b = model.predict_distribution(x, 6)
    assert np.array_equal(a.means, b.means)
    assert np.array_equal(a.covs, b.covs)
    assert np.array_equal(a.mode_weights, b.mode_weights)


def test_mode_weights_on_simplex(rng):
    model = mdl.MotionModel(_config(n_modes=4), rng=np.random.default_rng(3))
    fc = model.predict_distribution(_history(rng), 3)
    assert fc.mode_weights.shape == (4,)
    assert np.all(fc.mode_weights > 0)
    assert abs(fc.mode_weights.sum() - 1.0) < 1e-12


def test_single_mode_weight_is_one(rng):
    model = mdl.MotionModel(_config(n_modes=1), rng=np.random.default_rng(3))
    fc = model.predict_distribution(_history(rng), 3)
    assert np.allclose(fc.mode_weights, [1.0])


def test_covariances_are_spd(rng):
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(11))
    fc = model.predict_distribution(_history(rng), 8)
    for covs in (fc.covs, fc.diff_covs):
        sym_err = np.max(np.abs(covs - np.swapaxes(covs, -1, -2)))
        assert sym_err < 1e-12
        eig = np.linalg.eigvalsh(covs.reshape(-1, 3, 3))
        assert np.min(eig) > 0


def test_means_are_unit_quaternions(rng):
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(2))
    fc = model.predict_distribution(_history(rng), 5)
    for q in (fc.means, fc.diff_means):
        assert np.max(np.abs(np.linalg.norm(q, axis=-1) - 1.0)) < 1e-9


def test_horizon_prefix_consistency(rng):
    # autoregressive decode: a longer forecast extends a shorter one
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(5))
    x = _history(rng)
    short = model.predict_distribution(x, 4)
    long = model.predict_distribution(x, 9)
    assert np.allclose(short.means, long.means[:, :4], atol=1e-12)
    assert np.allclose(short.covs, long.covs[:, :4], atol=1e-12)


def test_absolute_cov_grows_with_horizon(rng):
    # integration accumulates step covariances, so the trace is monotone
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(5))
    fc = model.predict_distribution(_history(rng), 10)
    traces = np.trace(fc.covs, axis1=-2, axis2=-1)  # (Z, T, N)
    assert np.all(np.diff(traces, axis=1) > 0)


def test_distinct_modes_yield_distinct_forecasts(rng):
    model = mdl.MotionModel(_config(n_modes=2), rng=np.random.default_rng(9))
    fc = model.predict_distribution(_history(rng), 6)
    gap = np.max(np.abs(fc.means[0] - fc.means[1]))
    assert gap > 1e-4


def test_variable_history_length(rng):
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(1))
    for h in (2, 5, 9):
        fc = model.predict_distribution(_history(rng, n_frames=h), 3)
        assert fc.means.shape == (3, 3, 5, 4)
        assert np.isfinite(fc.means).all()


def test_occluded_input_stays_finite(rng):
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(1))
    x = _history(rng)
    x[:, 2] = NEUTRAL_STATE  # one node fully occluded
    fc = model.predict_distribution(x, 5)
    assert np.isfinite(fc.means).all()
    assert np.isfinite(fc.covs).all()


def test_mixture_at_gives_finite_log_pdf(rng):
    from motionforecast import so3stats as st

    model = mdl.MotionModel(_config(), rng=np.random.default_rng(4))
    fc = model.predict_distribution(_history(rng), 4)
    mix = fc.mixture_at(2, 1)
    val = st.mixture_log_pdf(mix, fc.means[0, 2, 1])
    assert np.isfinite(val)


def test_sampled_motions_are_unit_quaternions(rng):
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(6))
    x = _history(rng)
    motions = model.sample_motions(x, 5, 16, np.random.default_rng(0))
    assert motions.shape == (16, 5, 5, 4)
    assert np.max(np.abs(np.linalg.norm(motions, axis=-1) - 1.0)) < 1e-9


def test_sampling_is_seed_reproducible(rng):
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(6))
    x = _history(rng)
    a = model.sample_motions(x, 5, 8, np.random.default_rng(42))
    b = model.sample_motions(x, 5, 8, np.random.default_rng(42))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        model.sample_motions(x, 5, 0, np.random.default_rng(0))


def test_tight_forecast_samples_concentrate(rng):
    # shrink every step covariance to the floor: samples collapse onto the
    # integrated mean motion of their mode
    model = mdl.MotionModel(_config(n_modes=1), rng=np.random.default_rng(8))
    x = _history(rng)
    fc = model.predict_distribution(x, 4)
    tiny = mdl.ForecastResult(
        mode_weights=fc.mode_weights,
        means=fc.means,
        covs=fc.covs,
        diff_means=fc.diff_means,
        diff_covs=np.broadcast_to(np.eye(3) * 1e-14, fc.diff_covs.shape).copy(),
    )
    motions = model.sample_motions(x, 4, 6, np.random.default_rng(0), forecast=tiny)
    dots = np.abs(np.sum(motions * fc.means[0][None], axis=-1))
    assert np.max(1.0 - dots) < 1e-6


def test_ml_mode_and_w_mean_with_one_hot_weights(rng):
    model = mdl.MotionModel(_config(n_modes=3), rng=np.random.default_rng(10))
    # force the categorical to (almost exactly) one-hot on mode 1
    for w in model.latent_head.weights:
        w.data = np.zeros_like(w.data)
    for b in model.latent_head.biases:
        b.data = np.array([0.0, 60.0, 0.0])
    x = _history(rng)
    fc = model.predict_distribution(x, 5)
    assert fc.mode_weights[1] > 1 - 1e-12
    ml = model.ml_mode_motion(x, 5, forecast=fc)
    wm = model.w_mean_motion(x, 5, forecast=fc)
    assert np.allclose(ml, fc.means[1])
    dots = np.abs(np.sum(ml * wm, axis=-1))
    assert np.max(1.0 - dots) < 1e-9


def test_batched_and_single_windows_agree(rng):
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(12))
    x = _history(rng)
    single = model.predict_distribution(x, 4)
    batched = model.predict_distribution(x[None], 4)
    assert np.allclose(single.means, batched.means, atol=1e-12)


def test_param_count_typed_vs_untyped():
    cfg = _config()
    typed = mdl.param_count(cfg, typed=True)
    untyped = mdl.param_count(cfg, typed=False)
    assert typed < untyped
    # influence matrices are identical in both variants
    diff_with = untyped - typed
    diff_without = mdl.param_count(cfg, typed=False, include_influence=False) - mdl.param_count(
        cfg, typed=True, include_influence=False
    )
    assert diff_with == diff_without


def test_param_count_without_influence_ignores_node_count():
    small = mdl.ModelConfig(classes=[0, 1], d_hidden=8, n_modes=2)
    large = mdl.ModelConfig(classes=[0, 1, 0, 1, 0, 1], d_hidden=8, n_modes=2)
    assert mdl.param_count(small, include_influence=False) == mdl.param_count(
        large, include_influence=False
    )
    assert mdl.param_count(small) < mdl.param_count(large)


def test_checkpoint_round_trip(tmp_path, rng):
    model = mdl.MotionModel(_config(), rng=np.random.default_rng(21))
    x = _history(rng)
    before = model.predict_distribution(x, 5)
    path = tmp_path / "model.ckpt"
    mdl.save_checkpoint(model, path)
    assert path.read_bytes()[:7] == b"MOTRON1"
    loaded = mdl.load_checkpoint(path)
    after = loaded.predict_distribution(x, 5)
    # parameters round trip through float32 storage
    assert np.allclose(before.means, after.means, atol=1e-4)
    assert np.allclose(before.mode_weights, after.mode_weights, atol=1e-5)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        mdl.load_checkpoint(path)


def test_checkpoint_rejects_class_map_mismatch(tmp_path):
    model = mdl.MotionModel(_config(classes=(0, 1, 2, 1, 2)))
    path = tmp_path / "model.ckpt"
    mdl.save_checkpoint(model, path)
    with pytest.raises(ValueError, match="class map"):
        mdl.load_checkpoint(path, skeleton_classes=[0, 0, 1, 1, 2])
    loaded = mdl.load_checkpoint(path, skeleton_classes=[0, 1, 2, 1, 2])
    assert loaded.config.classes == [0, 1, 2, 1, 2]


def test_config_validation():
    with pytest.raises(ValueError):
        mdl.ModelConfig(classes=[0, 1], n_modes=0)
    with pytest.raises(ValueError):
        mdl.ModelConfig(classes=[0, 1], d_hidden=0)
