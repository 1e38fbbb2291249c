import os

import numpy as np
import pytest

from plmcmc import flow as F
from plmcmc import metrics
from plmcmc.data import Dataset, MaskSpec, apply_mask, whiten
from plmcmc.mcem import (ImputedDataset, McemAborted, McemConfig, duplicate_dataset,
                         impute_dataset, mcem_train, warmup_fill)
from plmcmc.oracles import affine_parameters, gaussian_conditional
from plmcmc.sampler import SamplerConfig, impute_rows

FAST = SamplerConfig(sigma_p=0.01, sigma_r=1.0, sigma_a=1e-3, proposals=100)


def _masked(rng, n=40, d=4, rate=0.5):
    x = rng.standard_normal((n, d))
    return apply_mask(Dataset(x, np.zeros_like(x, bool)), MaskSpec("independent", rate, 1))


def test_config_validation():
    with pytest.raises(ValueError):
        McemConfig(total_epochs=10, warmup_epochs=20)
    with pytest.raises(ValueError):
        McemConfig(resample_interval=0)
    with pytest.raises(ValueError):
        McemConfig(total_epochs=-1)
    c = McemConfig(sigma_r_schedule={"0": 1.0, 500: 0.5})
    assert c.sampler_at(499).sigma_r == 1.0 and c.sampler_at(600).sigma_r == 0.5
    d = McemConfig()
    assert (d.total_epochs, d.resample_interval, d.warmup_epochs, d.clamp) == (1000, 50, 50, True)


def test_warmup_fill_cases(rng):
    x = rng.standard_normal((5, 4))
    complete = ImputedDataset.from_dataset(Dataset(x, np.zeros_like(x, bool)))
    warmup_fill(complete, rng)
    np.testing.assert_array_equal(complete.data, x)

    miss = np.zeros((5, 4), bool)
    miss[2] = True
    row = ImputedDataset.from_dataset(Dataset(x, miss))
    warmup_fill(row, np.random.default_rng(0))
    np.testing.assert_array_equal(row.data[2], np.random.default_rng(0).standard_normal((5, 4))[2])
    np.testing.assert_array_equal(row.data[~miss], x[~miss])

    big = ImputedDataset.from_dataset(Dataset(np.zeros((1000, 100)), np.ones((1000, 100), bool)))
    warmup_fill(big, np.random.default_rng(1))
    assert abs(big.data.mean()) < 4 / np.sqrt(1e5)


def test_impute_complete_dataset_unchanged(rng):
    x = rng.standard_normal((6, 4))
    imp = ImputedDataset.from_dataset(Dataset(x, np.zeros_like(x, bool)))
    impute_dataset(F.build_flow(4, 2, 8, 1), imp, FAST, seed=0)
    np.testing.assert_array_equal(imp.data, x)


def test_clamp_postcondition(rng):
    ds = _masked(rng)
    imp = ImputedDataset.from_dataset(ds)
    model = F.build_flow(4, 2, 8, 1, seed=0)
    model.log_scale[:] = 2.0  # wide flow: draws routinely leave the observed range
    impute_dataset(model, imp, FAST, seed=0, clamp=True)
    assert np.all(imp.data >= imp.lo) and np.all(imp.data <= imp.hi)
    np.testing.assert_array_equal(imp.data[~ds.missing], ds.values[~ds.missing])


def test_zero_epochs_returns_initial_flow(rng):
    m0 = F.build_flow(4, 2, 8, 1, seed=0)
    m, hist, _ = mcem_train(m0, _masked(rng), McemConfig(total_epochs=0, warmup_epochs=0))
    for a, b in zip(m.parameters(), m0.parameters()):
        np.testing.assert_array_equal(a, b)
    assert hist.epoch == []


def test_observed_entries_bit_identical_and_schedule(rng, tmp_path):
    ds = _masked(rng)
    cfg = McemConfig(total_epochs=12, warmup_epochs=4, resample_interval=3, batch_size=20,
                     sampler=FAST, checkpoint_dir=str(tmp_path))
    m, hist, imp = mcem_train(F.build_flow(4, 2, 8, 1), ds, cfg, seed=1,
                              history_path=str(tmp_path / "history.csv"))
    np.testing.assert_array_equal(imp.data[~ds.missing], ds.values[~ds.missing])
    assert hist.resample_epochs == [4, 7, 10]
    assert hist.epoch == list(range(12))
    assert [e for e, v in zip(hist.epoch, hist.nmse) if v is not None] == [4, 7, 10]
    for e in (4, 7, 10):
        assert os.path.exists(tmp_path / "ckpt" / str(e) / "model.json")
        assert os.path.exists(tmp_path / "ckpt" / str(e) / "imputed.csv")
    header = (tmp_path / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,mean_nll,nmse"


def test_mcem_replays_bitwise(rng):
    ds = _masked(rng)
    cfg = McemConfig(total_epochs=6, warmup_epochs=2, resample_interval=2, batch_size=20,
                     sampler=FAST)
    a = mcem_train(F.build_flow(4, 2, 8, 1), ds, cfg, seed=3)
    b = mcem_train(F.build_flow(4, 2, 8, 1), ds, cfg, seed=3)
    np.testing.assert_array_equal(a[2].data, b[2].data)
    for p, q in zip(a[0].parameters(), b[0].parameters()):
        np.testing.assert_array_equal(p, q)


def test_abort_returns_last_good_model(rng):
    ds = _masked(rng)
    cfg = McemConfig(total_epochs=5, warmup_epochs=1, resample_interval=1, batch_size=20,
                     sampler=FAST, optimizer_kwargs={"lr": 1e306})
    with pytest.raises(McemAborted) as e:
        mcem_train(F.build_flow(4, 2, 8, 1), ds, cfg, seed=0)
    assert all(np.all(np.isfinite(p)) for p in e.value.model.parameters())


def test_duplicate_dataset(rng):
    ds = _masked(rng, n=7)
    assert duplicate_dataset(ds, 1).shape == ds.shape
    d10 = duplicate_dataset(ds, 10)
    assert d10.shape == (70, 4)
    obs = ~ds.missing
    mean1 = (ds.values * obs).sum(0) / obs.sum(0)
    obs10 = ~d10.missing
    np.testing.assert_allclose((d10.values * obs10).sum(0) / obs10.sum(0), mean1, rtol=1e-13)
    m = F.build_flow(4, 2, 8, 1)
    x = rng.standard_normal((7, 4))
    assert F.log_prob(m, np.tile(x, (10, 1))).mean() == pytest.approx(F.log_prob(m, x).mean())
    with pytest.raises(ValueError):
        duplicate_dataset(ds, 0)


def test_well_specified_imputation_matches_oracle_means():
    rng = np.random.default_rng(2)
    model = F.random_affine_flow(4, rng, scale_spread=0.2)
    A, b = affine_parameters(model)
    x = F.forward(model, rng.standard_normal((60, 4)))[0]
    miss = np.zeros_like(x, bool)
    miss[:, 1] = True
    cfg = SamplerConfig(sigma_p=0.1, sigma_r=1.0, sigma_a=1.0, proposals=1500, init_scale=1.0)
    comp = impute_rows(model, np.where(miss, 0, x), miss, cfg, seed=0, n_chains=1)[0]
    z = []
    for i in range(60):
        mu, cov = gaussian_conditional(A, b, {j: x[i, j] for j in (0, 2, 3)})
        z.append((comp[i, 1] - mu[0]) / np.sqrt(cov[0, 0]))
    z = np.array(z)
    # standardized residuals of single draws: mean 0, variance 1
    assert abs(z.mean()) < 3 / np.sqrt(60)
    assert 0.6 < z.var() < 1.5


@pytest.mark.slow
def test_synthetic_gaussian_beats_mean_imputation():
    rng = np.random.default_rng(0)
    C = np.array([[1, .8, .6, .4], [.8, 1, .8, .6], [.6, .8, 1, .8], [.4, .6, .8, 1]])
    x = rng.multivariate_normal(np.zeros(4), C, size=400)
    ds = apply_mask(Dataset(x, np.zeros_like(x, bool)), MaskSpec("independent", 0.5, 1))
    w, _ = whiten(ds)
    cfg = McemConfig(total_epochs=300, warmup_epochs=50, resample_interval=50, batch_size=400,
                     sampler=SamplerConfig(sigma_p=0.01, sigma_r=1.0, sigma_a=1e-3, proposals=500))
    m, _, _ = mcem_train(F.build_flow(4, 4, 32, 2, seed=0), w, cfg, seed=0)
    comp = impute_rows(m, np.where(w.missing, 0, w.values), w.missing, cfg.sampler, seed=5,
                       n_chains=10)
    sig = w.truth.std(0)
    avg = metrics.nmse(comp.mean(0), w.truth, w.missing, sig)
    mean = metrics.nmse(metrics.mean_imputation(w.values, w.missing), w.truth, w.missing, sig)
    assert avg < mean
    assert mean == pytest.approx(1.0, abs=0.1)
