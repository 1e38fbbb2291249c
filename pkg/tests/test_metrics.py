import numpy as np
import pytest

from plmcmc import metrics
from plmcmc.sampler import ChainTrace


def test_rmse_perfect_and_single():
    t = np.array([[1.0, 2.0]])
    m = np.array([[True, False]])
    assert metrics.reconstruction_rmse(t, t, m) == 0.0
    assert metrics.reconstruction_rmse([[1.5, 2.0]], t, m) == pytest.approx(0.5)


def test_rmse_is_mean_of_per_example_values():
    truth = np.zeros((2, 1))
    imp = np.array([[0.1], [0.3]])
    assert metrics.reconstruction_rmse(imp, truth, np.ones((2, 1), bool)) == pytest.approx(0.2)


def test_rows_without_missing_are_skipped_and_all_complete_rejected():
    truth = np.zeros((2, 2))
    imp = np.array([[0.5, 9.0], [0.0, 0.0]])
    m = np.array([[True, False], [False, False]])
    assert metrics.reconstruction_rmse(imp, truth, m) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        metrics.nmse(imp, truth, np.zeros((2, 2), bool), [1, 1])


def test_nmse_definition(rng):
    truth = rng.standard_normal((50, 3))
    m = rng.random((50, 3)) < 0.5
    m[:, 0] = True
    sig = np.array([1.0, 2.0, 0.5])
    imp = truth + 0.1
    assert metrics.nmse(truth, truth, m, sig) == 0.0
    per = [np.mean(((0.1 / sig)[row]) ** 2) for row in m]
    assert metrics.nmse(imp, truth, m, sig) == pytest.approx(np.mean(per))
    with pytest.raises(ValueError):
        metrics.nmse(imp, truth, m, [1.0, 0.0, 1.0])


def test_nmse_with_unit_sigma_is_mean_per_example_mse(rng):
    truth = rng.standard_normal((20, 4))
    imp = rng.standard_normal((20, 4))
    m = rng.random((20, 4)) < 0.6
    m[:, 1] = True
    per = [np.mean((truth[i] - imp[i])[m[i]] ** 2) for i in range(20)]
    assert metrics.nmse(imp, truth, m, np.ones(4)) == pytest.approx(np.mean(per))


def test_mean_imputation_on_gaussian_scores_one():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20000, 3))
    m = rng.random(x.shape) < 0.5
    filled = metrics.mean_imputation(np.where(m, 0.0, x), m)
    val = metrics.nmse(filled, x, m, x.std(axis=0))
    assert val == pytest.approx(1.0, abs=0.03)


def test_metrics_invariant_to_ordering(rng):
    truth = rng.standard_normal((10, 4))
    imp = rng.standard_normal((10, 4))
    m = rng.random((10, 4)) < 0.5
    m[:, 0] = True
    sig = np.abs(rng.standard_normal(4)) + 0.5
    perm, cols = rng.permutation(10), rng.permutation(4)
    a = metrics.nmse(imp, truth, m, sig)
    b = metrics.nmse(imp[perm][:, cols], truth[perm][:, cols], m[perm][:, cols], sig[cols])
    assert a == pytest.approx(b, rel=1e-13)
    assert metrics.reconstruction_rmse(imp, truth, m) == pytest.approx(
        metrics.reconstruction_rmse(imp[perm][:, cols], truth[perm][:, cols], m[perm][:, cols]))


def _trace(counts, checkpoints):
    counts = np.asarray(counts)
    return ChainTrace(np.asarray(checkpoints), np.zeros((len(checkpoints), counts.shape[1], 1)),
                      counts, np.zeros(counts.shape[1], int))


def test_acceptance_summary():
    all_acc = _trace([[0, 0], [10, 10], [20, 20]], [0, 10, 20])
    s = metrics.acceptance_summary(all_acc)
    np.testing.assert_array_equal(s["mean"], [1.0, 1.0])
    known = _trace([[0, 0], [5, 1], [6, 9]], [0, 10, 20])
    s = metrics.acceptance_summary([known])
    np.testing.assert_allclose(s["mean"], [0.3, 0.45])
    np.testing.assert_allclose(s["std"], [0.2, 0.35])
    with pytest.raises(ValueError):
        metrics.acceptance_summary(_trace([[0, 0]], [0]))
    with pytest.raises(ValueError):
        metrics.acceptance_summary([])


def test_metric_report_shape():
    r = metrics.metric_report("nmse", 0.5, 10, {"seed": 1, "output_dir": "a"})
    assert set(r) == {"metric", "value", "n_examples", "config_digest"}
    assert r["config_digest"] == metrics.config_digest({"seed": 1, "output_dir": "b"})
    assert r["config_digest"] != metrics.config_digest({"seed": 2})
