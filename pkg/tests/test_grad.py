import math
import warnings

import numpy as np
import pytest

from plmcmc import flow as F
from plmcmc.grad import (Adamax, NonFiniteUpdateError, RMSprop, TrainLog, make_optimizer,
                         nll_and_grad, train)

from helpers import FD_RTOL, fd_relative_errors, pick_coords, random_case


def test_identity_model_analytic_gradient():
    m = F.zero_flow(2, n_couplings=2, hidden=4, depth=2)
    nll, grads = nll_and_grad(m, np.zeros((1, 2)))
    assert nll == pytest.approx(math.log(2 * math.pi), abs=1e-12)
    for g in grads[:-1]:
        assert np.all(g == 0.0)
    np.testing.assert_array_equal(grads[-1], [1.0, 1.0])


@pytest.mark.parametrize("dim", [2, 3, 4, 6])
def test_gradient_matches_finite_differences(dim, rng):
    for _ in range(8):
        m, batch = random_case(rng, dim)
        _, grads = nll_and_grad(m, batch)
        errs = fd_relative_errors(m, batch, grads, pick_coords(m, rng, 6))
        assert errs.max() < FD_RTOL


def test_duplicated_batch_same_nll_and_grads(rng):
    m, batch = random_case(rng, 4)
    nll, g = nll_and_grad(m, batch)
    nll2, g2 = nll_and_grad(m, np.vstack([batch, batch]))
    assert nll2 == pytest.approx(nll, rel=1e-13)
    for a, b in zip(g, g2):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        nll_and_grad(F.zero_flow(2), np.zeros((0, 2)))


def _scalar_model():
    m = F.zero_flow(2, n_couplings=0)
    return m


@pytest.mark.parametrize("opt", [Adamax(), RMSprop(lr=0.01)])
def test_zero_gradient_leaves_parameters(opt):
    m = F.build_flow(2, 2, 4, 1, seed=0)
    before = [p.copy() for p in m.parameters()]
    opt.step(m, [np.zeros_like(p) for p in m.parameters()])
    for a, b in zip(before, m.parameters()):
        np.testing.assert_array_equal(a, b)


def test_adamax_scalar_trace():
    m = _scalar_model()
    opt = Adamax(lr=0.002)
    lr, b1, b2, eps = 0.002, 0.9, 0.999, 1e-8
    mom = u = 0.0
    theta = 0.0
    for t in range(1, 21):
        g = 1.0
        mom = b1 * mom + (1 - b1) * g
        u = max(b2 * u, abs(g))
        theta -= lr / (1 - b1 ** t) * mom / (u + eps)
        opt.step(m, [np.array([g, g])])
        assert m.log_scale[0] == pytest.approx(theta, rel=1e-14, abs=1e-18)
    # first move is lr * 1 / max-accumulator
    assert -(0.002 / 0.1 * 0.1 / (1 + 1e-8)) == pytest.approx(-0.002, rel=1e-7)


def test_rmsprop_momentum_scalar_trace():
    m = _scalar_model()
    opt = RMSprop(lr=1e-3, momentum=0.9, alpha=0.99, eps=1e-8)
    v = buf = theta = 0.0
    for _ in range(25):
        g = 0.5
        v = 0.99 * v + 0.01 * g * g
        buf = 0.9 * buf + g / (math.sqrt(v) + 1e-8)
        theta -= 1e-3 * buf
        opt.step(m, [np.array([g, g])])
        assert m.log_scale[1] == pytest.approx(theta, rel=1e-13)


def test_nonfinite_gradient_aborts_without_partial_update():
    m = F.build_flow(2, 2, 4, 1, seed=0)
    opt = Adamax()
    before = [p.copy() for p in m.parameters()]
    grads = [np.zeros_like(p) for p in m.parameters()]
    grads[-1] = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteUpdateError):
        opt.step(m, grads)
    for a, b in zip(before, m.parameters()):
        np.testing.assert_array_equal(a, b)
    assert opt.t == 0


def test_overflowing_update_aborts():
    m = F.build_flow(2, 2, 4, 1, seed=0)
    opt = Adamax(lr=1e308)
    grads = [np.ones_like(p) for p in m.parameters()]
    with pytest.raises(NonFiniteUpdateError):
        opt.step(m, grads)
        opt.step(m, grads)
    assert all(np.all(np.isfinite(p)) for p in m.parameters())


def test_make_optimizer():
    assert isinstance(make_optimizer("RMSprop"), RMSprop)
    assert make_optimizer("adamax", lr=0.1).lr == 0.1
    with pytest.raises(ValueError):
        make_optimizer("sgd")
    with pytest.raises(ValueError):
        Adamax(lr=0)


def test_train_zero_epochs_is_noop(rng):
    m = F.build_flow(2, 2, 4, 1, seed=0)
    before = [p.copy() for p in m.parameters()]
    train(m, rng.standard_normal((10, 2)), 0, 5, Adamax(), rng)
    for a, b in zip(before, m.parameters()):
        np.testing.assert_array_equal(a, b)


def test_train_clamps_batch_size(rng):
    m = F.build_flow(2, 2, 4, 1, seed=0)
    with pytest.warns(UserWarning, match="clamping"):
        train(m, rng.standard_normal((10, 2)), 1, 50, Adamax(), rng)


def test_train_rejects_incomplete_data(rng):
    data = rng.standard_normal((10, 2))
    data[3, 1] = np.nan
    with pytest.raises(F.NonFiniteInputError):
        train(F.build_flow(2, 2, 4, 1), data, 1, 5, Adamax(), rng)


def test_correlated_gaussian_reaches_entropy():
    rng = np.random.default_rng(0)
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    data = rng.multivariate_normal([0, 0], cov, 4000)
    held = rng.multivariate_normal([0, 0], cov, 4000)
    m = F.build_flow(2, 4, 16, 1, seed=0)
    _, log = train(m, data, 200, 500, Adamax(lr=0.01), np.random.default_rng(1))
    entropy = 0.5 * math.log(np.linalg.det(2 * math.pi * math.e * cov))
    assert -F.log_prob(m, held).mean() == pytest.approx(entropy, abs=0.1)
    assert np.mean(log.mean_nll[-10:]) <= np.mean(log.mean_nll[:10])


def test_training_replays_bitwise(rng):
    data = rng.standard_normal((64, 4))

    def run():
        m = F.build_flow(4, 2, 8, 2, seed=5)
        train(m, data, 5, 16, Adamax(), np.random.default_rng(7))
        return m.parameters()

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


def test_training_log_csv(tmp_path, rng):
    path = tmp_path / "log.csv"
    m = F.build_flow(2, 2, 4, 1)
    train(m, rng.standard_normal((20, 2)), 3, 10, Adamax(), rng, log_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,mean_nll" and len(lines) == 4
    assert isinstance(TrainLog().mean_nll, list)
