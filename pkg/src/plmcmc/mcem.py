"""Monte Carlo EM training of a flow from incomplete data.

Schedule: during the warm-up epochs every missing entry is redrawn from
N(0, 1) (whitened units) before each epoch. From then on, every
``resample_interval`` epochs the missing entries are replaced by PL-MCMC
completions from the current flow, optionally clamped to the observed
per-attribute range, and kept fixed until the next resample.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .data import Dataset, write_csv
from .grad import NonFiniteUpdateError, make_optimizer, run_epoch
from .sampler import SamplerConfig, impute_rows

logger = logging.getLogger(__name__)


@dataclass
class McemConfig:
    total_epochs: int = 1000
    resample_interval: int = 50
    warmup_epochs: int = 50
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(
        sigma_p=0.01, sigma_r=1.0, sigma_a=1e-3, proposals=1000))
    optimizer: str = "adamax"
    optimizer_kwargs: dict = field(default_factory=lambda: {"lr": 0.002})
    batch_size: int = 3000
    clamp: bool = True
    sigma_r_schedule: dict | None = None
    n_jobs: int = 1
    clip_norm: float | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if min(self.total_epochs, self.warmup_epochs) < 0 or self.resample_interval < 1:
            raise ValueError("epoch counts must be >= 0 and resample_interval >= 1")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs cannot exceed total_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def sampler_at(self, epoch):
        """Sampler config in force at ``epoch`` (applies the sigma_r schedule)."""
        if not self.sigma_r_schedule:
            return self.sampler
        starts = sorted(int(k) for k in self.sigma_r_schedule if int(k) <= epoch)
        if not starts:
            return self.sampler
        key = starts[-1]
        sr = self.sigma_r_schedule.get(key, self.sigma_r_schedule.get(str(key)))
        return self.sampler.replace(sigma_r=float(sr))


@dataclass
class ImputedDataset:
    """Current completed training matrix plus what is needed to refresh it."""

    data: np.ndarray
    missing: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    truth: np.ndarray | None = None
    columns: list = field(default_factory=list)

    @classmethod
    def from_dataset(cls, ds):
        obs = ~ds.missing
        lo = np.where(obs, ds.values, np.inf).min(axis=0)
        hi = np.where(obs, ds.values, -np.inf).max(axis=0)
        return cls(ds.values.copy(), ds.missing.copy(), lo, hi, ds.truth, list(ds.columns))

    def nmse(self):
        if self.truth is None or not self.missing.any():
            return None
        return metrics.nmse(self.data, self.truth, self.missing, self.truth.std(axis=0))


class McemAborted(RuntimeError):
    """Training hit non-finite parameters; ``model`` is the last good checkpoint."""

    def __init__(self, message, model, history):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass
class McemHistory:
    epoch: list = field(default_factory=list)
    mean_nll: list = field(default_factory=list)
    nmse: list = field(default_factory=list)
    resample_epochs: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_nll", "nmse"])
            for e, nll, err in zip(self.epoch, self.mean_nll, self.nmse):
                w.writerow([e, repr(float(nll)), "" if err is None else repr(float(err))])


def duplicate_dataset(ds, k):
    """Stack ``k`` copies of the rows together with their masks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    tile = lambda a: None if a is None else np.tile(a, (k, 1))  # noqa: E731
    return replace(ds, values=tile(ds.values), missing=tile(ds.missing), truth=tile(ds.truth))


def warmup_fill(imputed, rng):
    """Redraw every missing entry from N(0, 1); observed entries are untouched."""
    draws = rng.standard_normal(imputed.data.shape)
    imputed.data = np.where(imputed.missing, draws, imputed.data)
    return imputed


def impute_dataset(model, imputed, sampler_config, seed, round_index=0, clamp=True, n_jobs=1):
    """Replace every missing entry with a final PL-MCMC completion.

    Rows whose chain fails keep their previous imputation.
    """
    miss = imputed.missing
    x_obs = np.where(miss, 0.0, imputed.data)
    try:
        comp = impute_rows(model, x_obs, miss, sampler_config, seed, round_index, 1, n_jobs)[0]
    except (ValueError, FloatingPointError) as exc:
        logger.warning("batched imputation failed (%s); retrying row by row", exc)
        comp = imputed.data.copy()
        for i in np.flatnonzero(miss.any(axis=1)):
            try:
                comp[i] = impute_rows(model, x_obs[i:i + 1], miss[i:i + 1], sampler_config,
                                      seed, round_index)[0, 0]
            except (ValueError, FloatingPointError) as row_exc:
                logger.warning("row %d keeps its previous imputation: %s", i, row_exc)
    bad = ~np.all(np.isfinite(comp), axis=1)
    comp[bad] = imputed.data[bad]
    if clamp:
        comp = np.clip(comp, imputed.lo, imputed.hi)
    imputed.data = np.where(miss, comp, imputed.data)
    return imputed


def _checkpoint(directory, epoch, model, imputed):
    path = os.path.join(directory, "ckpt", str(epoch))
    os.makedirs(path, exist_ok=True)
    model.save(os.path.join(path, "model.json"))
    write_csv(os.path.join(path, "imputed.csv"), imputed.data, imputed.columns)


def mcem_train(flow_init, dataset, config, seed=0, history_path=None):
    """Alternate PL-MCMC imputation with complete-data training epochs.

    ``dataset`` is a :class:`~plmcmc.data.Dataset` (whitened) or an
    :class:`ImputedDataset`. Data are assumed missing at random. Returns
    ``(model, history, imputed)``; ``flow_init`` is not modified.
    """
    model = flow_init.copy()
    imputed = dataset if isinstance(dataset, ImputedDataset) else ImputedDataset.from_dataset(dataset)
    history = McemHistory()
    if config.total_epochs == 0:
        return model, history, imputed
    shuffle_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0])))
    fill_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))
    optimizer = make_optimizer(config.optimizer, **config.optimizer_kwargs)
    batch_size = min(config.batch_size, imputed.data.shape[0])
    last_good = model.copy()

    for epoch in range(config.total_epochs):
        err = None
        if epoch < config.warmup_epochs:
            warmup_fill(imputed, fill_rng)
        elif (epoch - config.warmup_epochs) % config.resample_interval == 0:
            impute_dataset(model, imputed, config.sampler_at(epoch), seed, epoch,
                           config.clamp, config.n_jobs)
            err = imputed.nmse()
            history.resample_epochs.append(epoch)
            last_good = model.copy()
            if config.checkpoint_dir:
                _checkpoint(config.checkpoint_dir, epoch, model, imputed)
            logger.info("epoch %d: resampled missing entries (nmse=%s)", epoch, err)
        try:
            nll = run_epoch(model, imputed.data, batch_size, optimizer, shuffle_rng, config.clip_norm)
        except NonFiniteUpdateError as exc:
            raise McemAborted(f"epoch {epoch}: {exc}", last_good, history) from exc
        history.epoch.append(epoch)
        history.mean_nll.append(nll)
        history.nmse.append(err)
        if history_path:
            history.to_csv(history_path)
    return model, history, imputed


def as_dataset(imputed):
    return Dataset(imputed.data, np.zeros_like(imputed.missing), imputed.columns)
