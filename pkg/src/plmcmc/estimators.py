"""scikit-learn style wrappers around the flow, the trainer and the sampler."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import flow as F
from ._validation import check_choice, check_complete, check_incomplete, check_positive, check_seed
from .data import Dataset, double_attributes, observed_stats, whiten
from .grad import make_optimizer, train
from .mcem import McemConfig, duplicate_dataset, mcem_train
from .sampler import UNIFORM, SamplerConfig, impute_rows


def _flow_kwargs(est):
    return dict(n_couplings=est.n_couplings, hidden=est.hidden, depth=est.depth, prior=est.prior)


def _optimizer(kind, learning_rate):
    kw = {} if learning_rate is None else {"lr": learning_rate}
    return make_optimizer(kind, **kw)


class NICEFlow(BaseEstimator):
    """Additive-coupling flow fit by maximum likelihood on complete data.

    With ``whiten=True`` the columns are standardized before fitting and
    :meth:`score_samples` reports densities in the original units.
    """

    def __init__(self, n_couplings=4, depth=5, hidden=120, prior="normal", optimizer="adamax",
                 learning_rate=None, epochs=100, batch_size=256, clip_norm=None, whiten=True,
                 random_state=0):
        self.n_couplings = n_couplings
        self.depth = depth
        self.hidden = hidden
        self.prior = prior
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.whiten = whiten
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_complete(X)
        check_choice("prior", self.prior, F.PRIORS)
        seed = check_seed(self.random_state)
        if self.whiten:
            self.whitening_ = observed_stats(Dataset(X, np.zeros(X.shape, bool)))
            Z = self.whitening_.apply(X)
        else:
            self.whitening_ = None
            Z = X
        self.n_features_in_ = X.shape[1]
        self.model_ = F.build_flow(X.shape[1], seed=seed, **_flow_kwargs(self))
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0])))
        _, log = train(self.model_, Z, self.epochs, min(self.batch_size, X.shape[0]),
                       _optimizer(self.optimizer, self.learning_rate), rng, self.clip_norm)
        self.loss_curve_ = list(log.mean_nll)
        return self

    def _log_jac(self):
        return 0.0 if self.whitening_ is None else -np.log(self.whitening_.std).sum()

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        X = check_complete(X, self.n_features_in_)
        Z = X if self.whitening_ is None else self.whitening_.apply(X)
        return F.log_prob(self.model_, Z) + self._log_jac()

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples=1, scale=1.0, random_state=None):
        check_is_fitted(self, "model_")
        rng = np.random.default_rng(random_state)
        Z = F.sample(self.model_, n_samples, scale, rng)
        return Z if self.whitening_ is None else self.whitening_.invert(Z)


class PLMCMCImputer(TransformerMixin, BaseEstimator):
    """Missing-value imputer: MC-EM flow training plus PL-MCMC conditional sampling.

    ``X`` marks missing cells with NaN. :meth:`fit` whitens with observed
    statistics, optionally doubles odd-width tables, duplicates rows and runs
    MC-EM. :meth:`transform` runs ``n_chains`` chains per incomplete row and
    returns either one draw (``mode="ind"``) or the chain average (``"avg"``).
    """

    def __init__(self, n_couplings=4, depth=5, hidden=120, prior="normal", epochs=1000,
                 warmup_epochs=50, resample_interval=50, duplicate=1, optimizer="adamax",
                 learning_rate=0.002, batch_size=3000, sigma_p=0.01, sigma_r=1.0, mix=0.5,
                 sigma_a=1e-3, proposals=1000, init="prior", init_scale=0.5, clamp=True,
                 double_odd=True, n_chains=25, mode="avg", n_jobs=1, random_state=0):
        self.n_couplings = n_couplings
        self.depth = depth
        self.hidden = hidden
        self.prior = prior
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.resample_interval = resample_interval
        self.duplicate = duplicate
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.sigma_p = sigma_p
        self.sigma_r = sigma_r
        self.mix = mix
        self.sigma_a = sigma_a
        self.proposals = proposals
        self.init = init
        self.init_scale = init_scale
        self.clamp = clamp
        self.double_odd = double_odd
        self.n_chains = n_chains
        self.mode = mode
        self.n_jobs = n_jobs
        self.random_state = random_state

    def sampler_config(self):
        sigma_a = self.sigma_a if self.sigma_a == UNIFORM else float(self.sigma_a)
        return SamplerConfig(self.sigma_p, self.sigma_r, self.mix, sigma_a, self.proposals,
                             self.init, self.init_scale)

    def _prepare(self, X):
        ds = Dataset.from_array(X)
        ds, _ = whiten(ds, self.whitening_)
        if self.doubled_:
            ds = double_attributes(ds)
        return ds

    def fit(self, X, y=None):
        X = check_incomplete(X)
        check_choice("prior", self.prior, F.PRIORS)
        check_positive("duplicate", self.duplicate)
        seed = check_seed(self.random_state)
        self.n_features_in_ = X.shape[1]
        self.whitening_ = observed_stats(Dataset.from_array(X))
        self.doubled_ = bool(self.double_odd and X.shape[1] % 2)
        ds = duplicate_dataset(self._prepare(X), int(self.duplicate))
        config = McemConfig(
            total_epochs=self.epochs, resample_interval=self.resample_interval,
            warmup_epochs=min(self.warmup_epochs, self.epochs), sampler=self.sampler_config(),
            optimizer=self.optimizer,
            optimizer_kwargs={} if self.learning_rate is None else {"lr": self.learning_rate},
            batch_size=self.batch_size, clamp=self.clamp, n_jobs=self.n_jobs)
        init = F.build_flow(ds.shape[1], seed=seed, **_flow_kwargs(self))
        self.model_, self.history_, _ = mcem_train(init, ds, config, seed)
        return self

    def sample_completions(self, X, n_chains=None):
        """All chain completions in original units, ``(n_chains, n, n_features)``."""
        check_is_fitted(self, "model_")
        X = check_incomplete(X, self.n_features_in_)
        n_chains = self.n_chains if n_chains is None else n_chains
        ds = self._prepare(X)
        comp = impute_rows(self.model_, ds.values, ds.missing, self.sampler_config(),
                           check_seed(self.random_state), 0, n_chains, self.n_jobs)
        comp = comp[:, :, : self.n_features_in_]
        comp = self.whitening_.invert(comp)
        if self.clamp:
            # observed range of the training data, as during MC-EM
            comp = np.clip(comp, self.whitening_.min, self.whitening_.max)
        return comp

    def transform(self, X):
        check_choice("mode", self.mode, ("ind", "avg"))
        X = check_incomplete(X, getattr(self, "n_features_in_", None))
        comp = self.sample_completions(X)
        fill = comp[0] if self.mode == "ind" else comp.mean(axis=0)
        return np.where(np.isnan(X), fill, X)
