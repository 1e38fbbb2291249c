import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from plmcmc import flow as F
from plmcmc.oracles import affine_parameters


def scaled_identity(dim, log_scale):
    m = F.zero_flow(dim)
    m.log_scale = np.asarray(log_scale, dtype=np.float64)
    return m


def test_zero_model_is_identity(rng):
    m = F.zero_flow(4)
    xi = rng.standard_normal(4)
    x, logdet = F.forward(m, xi)
    np.testing.assert_array_equal(x, xi)
    assert logdet == 0.0


def test_diagonal_scaling_forward_and_inverse():
    m = scaled_identity(2, [math.log(2), math.log(2)])
    x, ld = F.forward(m, [1.0, 1.0])
    np.testing.assert_allclose(x, [2.0, 2.0])
    assert ld == pytest.approx(2 * math.log(2))
    xi, ld_inv = F.inverse(m, [2.0, 2.0])
    np.testing.assert_allclose(xi, [1.0, 1.0])
    assert ld_inv == pytest.approx(-2 * math.log(2))


def test_zero_model_inverse():
    xi, ld = F.inverse(F.zero_flow(2), [0.3, -1.2])
    np.testing.assert_array_equal(xi, [0.3, -1.2])
    assert ld == 0.0


@pytest.mark.parametrize("prior", F.PRIORS)
def test_random_model_round_trip(rng, prior):
    m = F.build_flow(4, 4, 16, 3, prior, seed=1)
    m.log_scale = rng.normal(size=4)
    xi = rng.standard_normal((50, 4)) * 3
    back, ld_inv = F.inverse(m, F.forward(m, xi)[0])
    assert np.max(np.abs(back - xi)) <= 1e-9 * (1 + np.max(np.abs(xi)))
    np.testing.assert_allclose(ld_inv, -m.log_scale.sum())


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_round_trip_property(dim, seed, spread):
    rng = np.random.default_rng(seed)
    m = F.build_flow(dim, 3, 8, 2, seed=seed)
    m.log_scale = rng.uniform(-1, 1, dim)
    xi = rng.uniform(-spread, spread, size=(5, dim))
    back = F.inverse(m, F.forward(m, xi)[0])[0]
    assert np.max(np.abs(back - xi)) <= 1e-9 * (1 + np.max(np.abs(xi)))


def test_logdet_matches_finite_difference_jacobian(rng):
    h = 1e-6
    for k in range(50):
        dim = 2 + k % 5
        m = F.build_flow(dim, 3, 12, 2, seed=k)
        m.log_scale = rng.uniform(-0.7, 0.7, dim)
        xi = rng.standard_normal(dim)
        J = np.empty((dim, dim))
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = h
            J[:, j] = (F.forward(m, xi + e)[0] - F.forward(m, xi - e)[0]) / (2 * h)
        fd = np.linalg.slogdet(J)[1]
        ld = F.forward(m, xi)[1]
        assert abs(fd - ld) <= 1e-4 * max(1.0, abs(ld))


def test_log_prob_identity_normal_at_origin():
    assert F.log_prob(F.zero_flow(2), np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert -math.log(2 * math.pi) == pytest.approx(-1.837877, abs=1e-6)


def test_log_prob_identity_logistic_at_origin():
    # one-dimensional flows have no coupling, so use dim 2 and halve
    m = F.zero_flow(2, prior="logistic")
    assert F.log_prob(m, np.zeros(2)) / 2 == pytest.approx(math.log(0.25), abs=1e-12)
    assert F.prior_logpdf("logistic", np.array(0.0)) == pytest.approx(-1.386294, abs=1e-6)


def test_log_prob_affine_matches_dense_gaussian(rng):
    for dim in (2, 3, 5):
        m = F.random_affine_flow(dim, rng)
        A, b = affine_parameters(m)
        x = rng.standard_normal((20, dim)) * 2
        ref = stats.multivariate_normal(b, A @ A.T).logpdf(x)
        np.testing.assert_allclose(F.log_prob(m, x), ref, rtol=1e-10, atol=1e-10)


def test_logistic_logpdf_stable_far_out():
    z = np.array([-800.0, -40.0, 0.0, 40.0, 800.0])
    lp = F.prior_logpdf("logistic", z)
    assert np.all(np.isfinite(lp))
    np.testing.assert_allclose(lp[2:4], stats.logistic.logpdf(z[2:4]), rtol=1e-12)


def test_normalization_on_grid():
    m = F.build_flow(2, 4, 16, 2, seed=3)
    g = np.linspace(-12, 12, 801)
    X, Y = np.meshgrid(g, g, indexing="ij")
    p = np.exp(F.log_prob(m, np.column_stack([X.ravel(), Y.ravel()])))
    total = p.sum() * (g[1] - g[0]) ** 2
    assert total == pytest.approx(1.0, abs=1e-2)


def test_log_prob_finite_far_from_data():
    for prior in F.PRIORS:
        m = F.build_flow(4, 4, 16, 2, prior, seed=0)
        lp = F.log_prob(m, np.full((3, 4), [1e3, -1e3, 1e2, 0.0]))
        assert np.all(np.isfinite(lp))


def test_sample_prior_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        F.sample_prior(F.zero_flow(2), 3, scale=0.0)
    with pytest.raises(ValueError):
        F.sample_prior(F.zero_flow(2), 3, scale=-1.0)


def test_sample_prior_normal_mean_clt():
    z = F.sample_prior(F.zero_flow(2), 100_000, 1.0, np.random.default_rng(0))
    assert np.all(np.abs(z.mean(axis=0)) < 4 / math.sqrt(1e5))


def test_sample_prior_logistic_variance():
    z = F.sample_prior(F.zero_flow(2, prior="logistic"), 100_000, 1.0, np.random.default_rng(0))
    np.testing.assert_allclose(z.var(axis=0), math.pi ** 2 / 3, rtol=0.05)


def test_input_errors():
    m = F.zero_flow(4)
    with pytest.raises(ValueError):
        F.forward(m, np.zeros(3))
    with pytest.raises(F.NonFiniteInputError):
        F.forward(m, [0.0, np.nan, 0.0, 0.0])
    with pytest.raises(F.NonFiniteInputError):
        F.log_prob(m, [0.0, np.inf, 0.0, 0.0])


def test_partition_has_half_bits_and_is_shared():
    for dim in (2, 4, 6, 5):
        m = F.build_flow(dim, 4, 8, 1, seed=dim)
        assert m.partition.sum() == dim // 2
        a = np.flatnonzero(m.partition)
        for i, layer in enumerate(m.couplings):
            cond = layer.cond_idx if i % 2 == 0 else layer.trans_idx
            np.testing.assert_array_equal(cond, a)


def test_json_round_trip(tmp_path, rng):
    m = F.build_flow(4, 3, 8, 2, "logistic", seed=9)
    m.log_scale = rng.normal(size=4)
    m.metadata = {"note": "x"}
    path = tmp_path / "m.json"
    m.save(path)
    m2 = F.FlowModel.load(path)
    x = rng.standard_normal((5, 4))
    np.testing.assert_array_equal(F.log_prob(m, x), F.log_prob(m2, x))
    assert m2.prior == "logistic" and m2.metadata == {"note": "x"}
    doc = m.to_dict()
    assert doc["schema_version"] == F.SCHEMA_VERSION
    doc["schema_version"] = 99
    with pytest.raises(ValueError):
        F.FlowModel.from_dict(doc)
