import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import EXACT_LAYERS, layer_zscores, maxpool_rel_errors
from uncer import adf
from uncer.adf import ADFError, InputNoise, MomentTensor
from uncer.decoder import DecoderConfig, DropoutMask, build_decoder, forward
from uncer.rng import RngStream
from uncer.tensor import ShapeError


def mt(mean, var):
    return MomentTensor(np.asarray(mean, float), np.asarray(var, float))


# ---------------------------------------------------------------------------
# lift
# ---------------------------------------------------------------------------


def test_lift_zero_noise():
    x = np.random.default_rng(0).normal(size=(3, 5))
    m = adf.lift(x, 0.0)
    assert np.array_equal(m.mean, x) and not m.var.any()


def test_lift_bci_segment_constant_variance():
    m = adf.lift(np.zeros((22, 400)), InputNoise(0.1))
    assert m.var.shape == (22, 400) and np.all(m.var == 0.1)


def test_lift_per_channel_rows():
    v = np.array([0.1, 0.2, 0.3])
    m = adf.lift(np.zeros((2, 3, 7)), InputNoise(v, per_channel=True))
    for i in range(3):
        assert np.all(m.var[:, i] == v[i])
    with pytest.raises(ShapeError):
        adf.lift(np.zeros((4, 7)), InputNoise(v, per_channel=True))


def test_lift_negative_noise():
    with pytest.raises(ValueError):
        adf.lift(np.zeros(3), -0.1)


def test_moment_shape_mismatch():
    with pytest.raises(ShapeError):
        MomentTensor(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# per-layer examples
# ---------------------------------------------------------------------------


def test_linear_identity_and_scale():
    m = mt([[1.0, -2.0, 0.5]], [[0.1, 0.2, 0.3]])
    same = adf.adf_linear(m, np.eye(3))
    assert np.array_equal(same.mean, m.mean) and np.array_equal(same.var, m.var)
    twice = adf.adf_linear(m, 2 * np.eye(3))
    assert np.allclose(twice.mean, 2 * m.mean) and np.allclose(twice.var, 4 * m.var)


def test_linear_conv_identity_kernel():
    r = np.random.default_rng(1)
    m = mt(r.normal(size=(2, 3, 4, 5)), r.uniform(0, 1, (2, 3, 4, 5)))
    k = np.zeros((3, 1, 1, 1))
    k[:, 0, 0, 0] = 1.0
    out = adf.adf_linear(m, k, groups=3)
    assert np.array_equal(out.mean, m.mean) and np.array_equal(out.var, m.var)


def test_linear_shape_errors():
    with pytest.raises(ShapeError):
        adf.adf_linear(mt(np.zeros((1, 3)), np.zeros((1, 3))), np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        adf.adf_linear(mt(np.zeros((1, 3)), np.zeros((1, 3))), np.zeros(3))


def test_relu_standard_normal():
    m = adf.adf_relu(mt([0.0], [1.0]))
    assert m.mean[0] == pytest.approx(0.39894, abs=1e-4)
    assert m.var[0] == pytest.approx(0.34085, abs=1e-4)


def test_relu_tails():
    m = adf.adf_relu(mt([10.0, -10.0], [1.0, 1.0]))
    assert abs(m.mean[0] - 10) < 1e-6 and abs(m.var[0] - 1) < 1e-6
    assert m.mean[1] < 1e-6 and m.var[1] < 1e-6


def test_relu_zero_variance_is_relu():
    mu = np.array([-1.5, 0.0, 2.5])
    m = adf.adf_relu(mt(mu, np.zeros(3)))
    assert np.array_equal(m.mean, np.maximum(mu, 0)) and not m.var.any()


def test_relu_standard_normal_against_large_mc():
    z = np.random.default_rng(2).standard_normal(10_000_000)
    y = np.maximum(z, 0)
    m = adf.adf_relu(mt([0.0], [1.0]))
    assert abs(y.mean() - m.mean[0]) < 1e-3 and abs(y.var() - m.var[0]) < 1e-3


@given(st.floats(-40, 40), st.floats(1e-6, 50))
def test_relu_moments_valid(mu, v):
    mean, var = adf.relu_moments(np.array([mu]), np.array([v]))
    assert mean[0] >= max(mu, 0.0) - 1e-9 * (1 + abs(mu))
    assert 0.0 <= var[0] <= v * (1 + 1e-9)


def test_batchnorm_identity_and_scale():
    r = np.random.default_rng(3)
    m = mt(r.normal(size=(2, 2, 1, 3)), r.uniform(0, 1, (2, 2, 1, 3)))
    same = adf.adf_batchnorm(m, np.zeros(2), np.ones(2), np.ones(2), np.zeros(2), eps=0.0)
    assert np.array_equal(same.mean, m.mean) and np.array_equal(same.var, m.var)
    scaled = adf.adf_batchnorm(m, np.zeros(2), np.ones(2), 3 * np.ones(2), np.zeros(2), eps=0.0)
    assert np.allclose(scaled.var, 9 * m.var)


def test_avgpool_examples():
    r = np.random.default_rng(4)
    m = mt(r.normal(size=(1, 2, 1, 4)), r.uniform(0, 1, (1, 2, 1, 4)))
    same = adf.adf_avgpool(m, (1, 1))
    assert np.array_equal(same.mean, m.mean) and np.array_equal(same.var, m.var)
    half = adf.adf_avgpool(mt(np.zeros((1, 1, 1, 4)), np.full((1, 1, 1, 4), 0.6)), (1, 2))
    assert np.allclose(half.var, 0.3)
    with pytest.raises(ShapeError):
        adf.adf_avgpool(m, (1, 3))


def test_maxpool_examples():
    r = np.random.default_rng(5)
    m = mt(r.normal(size=(1, 2, 1, 4)), r.uniform(0, 1, (1, 2, 1, 4)))
    same = adf.adf_maxpool(m, (1, 1))
    assert np.array_equal(same.mean, m.mean) and np.array_equal(same.var, m.var)
    pair = adf.adf_maxpool(mt(np.zeros((1, 1, 1, 2)), np.ones((1, 1, 1, 2))), (1, 2))
    assert pair.mean.item() == pytest.approx(1 / np.sqrt(np.pi), abs=1e-3)
    assert pair.var.item() == pytest.approx(1 - 1 / np.pi, abs=1e-3)
    with pytest.raises(ShapeError):
        adf.adf_maxpool(m, (1, 3))


def test_maxpool_pair_mc_cross_check():
    z = np.random.default_rng(6).standard_normal((1_000_000, 2)).max(axis=1)
    assert abs(z.mean() - 1 / np.sqrt(np.pi)) < 3e-3 and abs(z.var() - (1 - 1 / np.pi)) < 3e-3


def test_maxpool_zero_variance_is_max():
    mu = np.array([[[[0.3, -1.0, 2.0, 1.9]]]])
    m = adf.adf_maxpool(mt(mu, np.zeros_like(mu)), (1, 4))
    assert m.mean.item() == 2.0 and m.var.item() == 0.0


def test_dropout_examples():
    r = np.random.default_rng(7)
    m = mt(r.normal(size=(2, 3, 1, 4)), r.uniform(0, 1, (2, 3, 1, 4)))
    same = adf.adf_dropout(m, np.ones((3, 1, 4)))
    assert np.array_equal(same.mean, m.mean) and np.array_equal(same.var, m.var)
    gone = adf.adf_dropout(m, np.zeros((3, 1, 4)))
    assert not gone.mean.any() and not gone.var.any()


def test_dropout_equals_diagonal_linear():
    r = np.random.default_rng(8)
    m = mt(r.normal(size=(5, 9)), r.uniform(0, 1, (5, 9)))
    mask = (r.uniform(size=9) < 0.6).astype(float)
    a = adf.adf_dropout(m, mask)
    b = adf.adf_linear(m, np.diag(mask))
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var)


def test_dropout_errors():
    m = mt(np.zeros((1, 4)), np.zeros((1, 4)))
    with pytest.raises(ValueError):
        adf.adf_dropout(m, np.full(4, 0.5))
    with pytest.raises(ShapeError):
        adf.adf_dropout(m, np.ones(3))


# ---------------------------------------------------------------------------
# Monte-Carlo oracles
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", EXACT_LAYERS)
def test_layer_matches_mc_within_3se(kind):
    z = layer_zscores(kind, n_configs=20, n_mc=100_000)
    assert z.shape == (20, 2)
    assert np.all(z < 3.0), z.max(axis=0)


def test_maxpool_4wide_against_mc():
    # The iterated pairwise rule treats each running max as Gaussian. Its mean
    # is within 5%; its variance is not (measured up to ~15% on this grid),
    # so the variance bound here is the measured envelope rather than 5%.
    err = maxpool_rel_errors(n_configs=20, n_mc=1_000_000)
    assert err[:, 0].max() < 0.05
    assert err[:, 1].max() < 0.25
    assert np.median(err[:, 1]) < 0.10


def test_iterated_max_is_exact_only_for_pairs():
    """Four iid standard normals: exact max moments 1.0294 / 0.4917."""
    m = adf.adf_maxpool(mt(np.zeros((1, 1, 1, 4)), np.ones((1, 1, 1, 4))), (1, 4))
    assert abs(m.mean.item() - 1.0294) < 0.01
    assert abs(m.var.item() - 0.4917) / 0.4917 < 0.06


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def inputs(small_config):
    return np.random.default_rng(9).normal(size=(100, small_config.n_channels, small_config.n_samples))


def test_zero_noise_matches_deterministic_forward(small_model, inputs):
    m = adf.adf_forward(small_model, adf.lift(inputs[:20], 0.0), DropoutMask.ones(small_model.config))
    ref = forward(small_model, inputs[:20]).data
    assert np.abs(m.mean - ref).max() <= 1e-9
    assert not m.var.any()


@pytest.mark.parametrize("pooling", ["avg", "max"])
def test_zero_noise_matches_forward_across_configs(pooling):
    cfg = DecoderConfig(n_channels=4, n_samples=24, n_classes=2, temporal_filters=3, depth_multiplier=1,
                        pointwise_filters=5, temporal_kernel=6, pool_size=3, pool=pooling)
    model = build_decoder(cfg, RngStream(2))
    model.eval()
    x = np.random.default_rng(0).normal(size=(6, 4, 24))
    mask = DropoutMask.sample(cfg, 0.7, RngStream(1))
    m = adf.adf_forward(model, adf.lift(x, 0.0), mask)
    assert np.abs(m.mean - forward(model, x, mask=mask).data).max() <= 1e-9


def test_output_shape_and_nonnegative_variance(small_model, inputs):
    m = adf.adf_forward(small_model, adf.lift(inputs, 0.1))
    assert m.shape == (100, small_model.config.n_classes)
    assert np.all(m.var >= 0) and np.all(m.var > 0)


def test_variance_monotone_in_u(small_model, inputs):
    prev = None
    for u in (0.01, 0.02, 0.05, 0.1, 0.2, 0.3):
        v = adf.adf_forward(small_model, adf.lift(inputs, u)).var
        if prev is not None:
            assert np.all(v >= prev * (1 - 1e-12))
        prev = v


def test_prefix_suffix_equals_forward(small_model, inputs):
    mask = DropoutMask.sample(small_model.config, 0.75, RngStream(3))
    m0 = adf.lift(inputs[:10], 0.05)
    whole = adf.adf_forward(small_model, m0, mask)
    split = adf.adf_suffix(small_model, adf.adf_prefix(small_model, m0), mask)
    assert np.array_equal(whole.mean, split.mean) and np.array_equal(whole.var, split.var)


def test_parameters_untouched(small_model, inputs):
    before = {k: p.data.copy() for k, p in small_model.params.items()}
    adf.adf_forward(small_model, adf.lift(inputs[:5], 0.1))
    assert all(np.array_equal(before[k], p.data) for k, p in small_model.params.items())


def test_requires_eval_mode(small_config):
    model = build_decoder(small_config, RngStream(0))
    model.train()
    with pytest.raises(ADFError):
        adf.adf_forward(model, adf.lift(np.zeros((1, 6, 32)), 0.1))


def test_errors_carry_layer_index(small_model, small_config):
    bad = DropoutMask.ones(small_config)
    bad.layers[0] = np.ones((1, 1, 1))
    with pytest.raises(ADFError, match=r"layer \d+"):
        adf.adf_forward(small_model, adf.lift(np.zeros((1, 6, 32)), 0.1), bad)


def test_unknown_covariance_mode(small_model):
    with pytest.raises(ValueError):
        adf.adf_forward(small_model, adf.lift(np.zeros((1, 6, 32)), 0.1), covariance="banded")


def test_full_mode_zero_noise_and_single_layer_exactness(small_model, inputs):
    x = inputs[:3]
    full = adf.adf_forward(small_model, adf.lift(x, 0.0), covariance="full")
    assert np.abs(full.mean - forward(small_model, x).data).max() <= 1e-9
    assert np.abs(full.var).max() <= 1e-20
    # with noise: mean close to diagonal mode, variances non-negative
    a = adf.adf_forward(small_model, adf.lift(x, 0.1), covariance="full")
    b = adf.adf_forward(small_model, adf.lift(x, 0.1))
    assert np.all(a.var >= 0)
    assert np.abs(a.mean - b.mean).max() < 0.5 * (1 + np.abs(b.mean).max())


def test_full_mode_beats_diagonal_against_mc(small_model, inputs):
    """Correlations created by convolution matter; tracking them is closer to MC."""
    x = inputs[:4]
    u = 0.1
    r = np.random.default_rng(10)
    draws = x[None] + np.sqrt(u) * r.standard_normal((4000,) + x.shape)
    logits = forward(small_model, draws.reshape(-1, *x.shape[1:])).data.reshape(4000, 4, -1)
    mc_var = logits.var(axis=0)
    diag = adf.adf_forward(small_model, adf.lift(x, u)).var
    full = adf.adf_forward(small_model, adf.lift(x, u), covariance="full").var
    err = lambda v: np.mean(np.abs(v - mc_var) / mc_var)
    assert err(full) < err(diag)
    assert err(full) < 0.15


@given(hnp.arrays(np.float64, (2, 6, 32), elements=st.floats(-3, 3)), st.floats(0, 0.5))
def test_variance_nonnegative_property(small_model, x, u):
    m = adf.adf_forward(small_model, adf.lift(x, u))
    assert np.all(m.var >= 0) and np.all(np.isfinite(m.mean))
