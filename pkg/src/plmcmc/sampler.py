"""Latent-space Metropolis-Hastings conditional sampling for coupling flows.

A chain lives in the flow's latent space. Each state ``xi`` maps to a data
point ``y = f(xi)``; the missing block of ``y`` joined with the conditioning
values (the projected point) is scored under the flow's joint density, and
the generated observed block ``y_O`` is scored by an auxiliary density ``q``.
The chain targets ``q(y_O) p(y_M; x_O) |det df/dxi|`` in latent space, whose
``y_M`` marginal is the flow's conditional ``p(y_M | x_O)`` for any proper
``q``.

All routines work on batches of chains. Each chain draws from its own
Philox stream keyed by ``(seed, sample index, chain index, round)`` so the
result for a chain never depends on how chains are batched or ordered.
"""
from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .flow import NonFiniteInputError, prior_logpdf

logger = logging.getLogger(__name__)

PERTURB = 0
RESAMPLE = 1
UNIFORM = "uniform"
INIT_POLICIES = ("prior", "observed", "latent")
_LOG_2PI = np.log(2.0 * np.pi)
_BLOCK = 256


# --------------------------------------------------------------------------
# configuration and domain types


@dataclass(frozen=True)
class SamplerConfig:
    """Kernel scales, auxiliary scale and budget for one PL-MCMC chain.

    ``sigma_a`` is either a positive float or :data:`UNIFORM` for the improper
    uniform auxiliary density. ``exact_kernel`` swaps the tag-based kernel
    ratio for the exact two-component mixture density.
    """

    sigma_p: float = 0.05
    sigma_r: float = 0.5
    mix: float = 0.5
    sigma_a: float | str = 1e-3
    proposals: int = 1000
    init: str = "prior"
    init_scale: float = 0.5
    exact_kernel: bool = False

    def __post_init__(self):
        if not (self.sigma_p > 0 and self.sigma_r > 0):
            raise ValueError("sigma_p and sigma_r must be positive")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError("mix must lie in [0, 1]")
        if self.sigma_a != UNIFORM and not (isinstance(self.sigma_a, (int, float)) and self.sigma_a > 0):
            raise ValueError(f"sigma_a must be positive or {UNIFORM!r}")
        if self.proposals < 0:
            raise ValueError("proposals must be >= 0")
        if self.init not in INIT_POLICIES:
            raise ValueError(f"init must be one of {INIT_POLICIES}")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")
        if 0.0 < self.mix and not self.exact_kernel and self.sigma_p > self.sigma_r / 10:
            warnings.warn("tag-based kernel ratio assumes sigma_p << sigma_r "
                          f"(got sigma_p={self.sigma_p}, sigma_r={self.sigma_r})", stacklevel=3)

    @property
    def aux(self):
        return AuxiliaryDensity(None if self.sigma_a == UNIFORM else float(self.sigma_a))

    def replace(self, **changes):
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return SamplerConfig(**values)


@dataclass(frozen=True)
class AuxiliaryDensity:
    """Isotropic normal centred on the conditioning values, or improper uniform.

    ``log_shift`` rescales ``q`` by a positive constant. Acceptance only ever
    uses :meth:`log_kernel`, so the shift cancels exactly.
    """

    sigma: float | None = 1e-3
    log_shift: float = 0.0

    @property
    def is_uniform(self):
        return self.sigma is None

    def log_kernel(self, y, x_obs, miss):
        if self.sigma is None:
            return np.zeros(y.shape[0])
        r = np.where(miss, 0.0, (y - x_obs) / self.sigma)
        return -0.5 * np.sum(r * r, axis=1)

    def log_density(self, y, x_obs, miss):
        base = self.log_kernel(y, x_obs, miss) + self.log_shift
        if self.sigma is None:
            return base
        n_obs = np.sum(~miss, axis=1)
        return base - n_obs * (np.log(self.sigma) + 0.5 * _LOG_2PI)


@dataclass
class MaskedSample:
    """One data row: observed values plus the set of missing positions."""

    values: np.ndarray
    missing: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing = np.unique(np.asarray(self.missing, dtype=int))
        if self.missing.size and (self.missing[0] < 0 or self.missing[-1] >= self.dim):
            raise ValueError("missing indices out of range")
        if not np.all(np.isfinite(self.values[self.observed_idx])):
            raise NonFiniteInputError("observed values must be finite")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.float64)

    @classmethod
    def from_row(cls, row, truth=None):
        """Build from a vector where NaN marks the missing entries."""
        row = np.asarray(row, dtype=np.float64)
        return cls(row, np.flatnonzero(np.isnan(row)), truth)

    @property
    def dim(self):
        return self.values.size

    @property
    def miss_mask(self):
        m = np.zeros(self.dim, dtype=bool)
        m[self.missing] = True
        return m

    @property
    def observed_idx(self):
        return np.flatnonzero(~self.miss_mask)

    @property
    def observed(self):
        return {int(i): float(self.values[i]) for i in self.observed_idx}

    def batch(self, n):
        """``(x_obs, miss)`` arrays repeated for ``n`` chains; missing slots hold 0."""
        miss = np.broadcast_to(self.miss_mask, (n, self.dim)).copy()
        x_obs = np.where(miss, 0.0, self.values)
        return x_obs, miss


@dataclass
class ChainState:
    """Current latent states of a batch of chains and their cached target parts."""

    xi: np.ndarray
    y: np.ndarray
    logdet: np.ndarray
    log_p: np.ndarray
    log_q: np.ndarray
    accepted: np.ndarray
    proposed: np.ndarray
    incidents: np.ndarray

    @property
    def log_target(self):
        return self.log_q + self.log_p + self.logdet

    def completion(self, x_obs, miss):
        return np.where(miss, self.y, x_obs)


# --------------------------------------------------------------------------
# unchecked flow evaluation (proposals may overflow; callers handle non-finite)


def _forward_raw(model, xi):
    h = xi
    for layer in model.couplings:
        h = layer.forward(h)
    return h * np.exp(model.log_scale), np.full(xi.shape[0], model.log_scale.sum())


def _log_prob_raw(model, x):
    h = x * np.exp(-model.log_scale)
    for layer in reversed(model.couplings):
        h = layer.inverse(h)
    return prior_logpdf(model.prior, h).sum(axis=1) - model.log_scale.sum()


def _inverse_raw(model, x):
    h = x * np.exp(-model.log_scale)
    for layer in reversed(model.couplings):
        h = layer.inverse(h)
    return h


class _Target:
    def __init__(self, model, x_obs, miss, aux):
        self.model = model
        self.x_obs = x_obs
        self.miss = miss
        self.aux = aux

    def evaluate(self, xi):
        with np.errstate(over="ignore", invalid="ignore"):
            y, logdet = _forward_raw(self.model, xi)
            projected = np.where(self.miss, y, self.x_obs)
            log_p = _log_prob_raw(self.model, projected)
            log_q = self.aux.log_kernel(y, self.x_obs, self.miss)
        return y, logdet, log_p, log_q

    def init_state(self, xi):
        y, logdet, log_p, log_q = self.evaluate(xi)
        if not (np.all(np.isfinite(log_p)) and np.all(np.isfinite(log_q))):
            raise NonFiniteInputError("initial latent state has a non-finite target")
        n = xi.shape[0]
        zeros = np.zeros(n, dtype=np.int64)
        return ChainState(xi, y, logdet, log_p, log_q, zeros, zeros.copy(), zeros.copy())


# --------------------------------------------------------------------------
# kernels


def _propose_from(xi, normals, u_kernel, config):
    tags = np.where(u_kernel < config.mix, RESAMPLE, PERTURB)
    perturbed = xi + config.sigma_p * normals
    resampled = config.sigma_r * normals
    return np.where(tags[:, None] == RESAMPLE, resampled, perturbed), tags


def propose(xi, config, rng):
    """Draw a proposal for each row of ``xi``. Returns ``(xi_new, tags)``."""
    xi = np.asarray(xi, dtype=np.float64)
    single = xi.ndim == 1
    xi2 = np.atleast_2d(xi)
    u = rng.random(xi2.shape[0])
    normals = rng.standard_normal(xi2.shape)
    new, tags = _propose_from(xi2, normals, u, config)
    if single:
        return new[0], int(tags[0])
    return new, tags


def _mixture_logpdf(a, b, config):
    d = a.shape[-1]
    lp = (-0.5 * np.sum((a - b) ** 2, axis=-1) / config.sigma_p ** 2
          - d * (np.log(config.sigma_p) + 0.5 * _LOG_2PI))
    lr = (-0.5 * np.sum(a ** 2, axis=-1) / config.sigma_r ** 2
          - d * (np.log(config.sigma_r) + 0.5 * _LOG_2PI))
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log1p(-config.mix) + lp, np.log(config.mix) + lr)


def log_kernel_ratio(xi, xi_new, tags, config):
    """``log g(xi | xi_new) - log g(xi_new | xi)``.

    With the default tag-based approximation a perturbation counts as the
    symmetric perturbation kernel and a resample as the state-independent
    resampling kernel.
    """
    xi = np.asarray(xi, dtype=np.float64)
    xi_new = np.asarray(xi_new, dtype=np.float64)
    if config.exact_kernel:
        return _mixture_logpdf(xi, xi_new, config) - _mixture_logpdf(xi_new, xi, config)
    tags = np.asarray(tags)
    resample_term = (np.sum(xi_new ** 2, axis=-1) - np.sum(xi ** 2, axis=-1)) / (2.0 * config.sigma_r ** 2)
    return np.where(tags == RESAMPLE, resample_term, 0.0)


def log_target(model, xi, sample, aux=None):
    """Log target parts for one latent vector.

    Returns ``(log_t, parts)`` where ``log_t = log q(y_O) + log p(y_M; x_O)``
    and ``parts`` also carries ``y``, the projected point and the forward
    log-determinant that turns ``log_t`` into a latent-space density.
    """
    aux = AuxiliaryDensity(None) if aux is None else aux
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (sample.dim,):
        raise ValueError(f"xi must have shape ({sample.dim},)")
    if not np.all(np.isfinite(xi)):
        raise NonFiniteInputError("xi contains non-finite values")
    x_obs, miss = sample.batch(1)
    y, logdet = _forward_raw(model, xi[None, :])
    projected = np.where(miss, y, x_obs)
    log_p = float(_log_prob_raw(model, projected)[0])
    log_q = float(aux.log_density(y, x_obs, miss)[0])
    parts = {"y": y[0], "projected": projected[0], "log_p": log_p, "log_q": log_q,
             "logdet": float(logdet[0])}
    return log_q + log_p, parts


def _decide(log_alpha, u):
    """Accept iff ``u < min(1, exp(log_alpha))``; non-finite ratios reject."""
    finite = np.isfinite(log_alpha)
    safe = np.where(finite, log_alpha, -np.inf)
    with np.errstate(under="ignore"):
        return finite & ((safe >= 0.0) | (u < np.exp(np.minimum(safe, 0.0))))


def _apply(state, accept, xi_new, y, logdet, log_p, log_q):
    state.proposed += 1
    state.accepted += accept
    a = accept[:, None]
    state.xi = np.where(a, xi_new, state.xi)
    state.y = np.where(a, y, state.y)
    state.logdet = np.where(accept, logdet, state.logdet)
    state.log_p = np.where(accept, log_p, state.log_p)
    state.log_q = np.where(accept, log_q, state.log_q)


def _mh_update(state, target, xi_new, tags, u_accept, config):
    """Accept/reject a batch of proposals in place. Returns (accept, log_alpha)."""
    y, logdet, log_p, log_q = target.evaluate(xi_new)
    with np.errstate(invalid="ignore", over="ignore"):
        log_alpha = ((log_q - state.log_q) + (log_p - state.log_p)
                     + (logdet - state.logdet)
                     + log_kernel_ratio(state.xi, xi_new, tags, config))
    state.incidents += ~np.isfinite(log_alpha)
    accept = _decide(log_alpha, u_accept)
    _apply(state, accept, xi_new, y, logdet, log_p, log_q)
    return accept, log_alpha


def log_acceptance_ratio(model, sample, xi, xi_new, tags, config, aux=None):
    """``log alpha`` for moving each row of ``xi`` to ``xi_new`` (no draw, no update)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    xi_new = np.atleast_2d(np.asarray(xi_new, dtype=np.float64))
    x_obs, miss = sample.batch(xi.shape[0])
    target = _Target(model, x_obs, miss, config.aux if aux is None else aux)
    _, logdet, log_p, log_q = target.evaluate(xi)
    _, logdet_new, log_p_new, log_q_new = target.evaluate(xi_new)
    with np.errstate(invalid="ignore", over="ignore"):
        return ((log_q_new - log_q) + (log_p_new - log_p) + (logdet_new - logdet)
                + log_kernel_ratio(xi, xi_new, np.broadcast_to(tags, xi.shape[:1]), config))


def init_chain_state(model, sample, xi, aux=None):
    """Chain state for latent start points ``xi`` (shape ``(n, dim)``)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    x_obs, miss = sample.batch(xi.shape[0])
    aux = AuxiliaryDensity(None) if aux is None else aux
    return _Target(model, x_obs, miss, aux).init_state(xi)


def plmcmc_step(state, model, sample, config, rng, aux=None):
    """One Metropolis-Hastings update of every chain in ``state``.

    Draws the proposal, then one uniform per chain, and accepts when
    ``u < alpha``. Non-finite acceptance ratios are rejected and counted in
    ``state.incidents``.
    """
    aux = config.aux if aux is None else aux
    n = state.xi.shape[0]
    x_obs, miss = sample.batch(n)
    xi_new, tags = propose(state.xi, config, rng)
    u = rng.random(n)
    _mh_update(state, _Target(model, x_obs, miss, aux), xi_new, tags, u, config)
    return state


# --------------------------------------------------------------------------
# per-chain random streams


def chain_generator(seed, *key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


class ChainStreams:
    """One counter-based generator per chain, drawn in fixed-size blocks."""

    def __init__(self, seed, keys):
        self.gens = [chain_generator(seed, *k) for k in keys]

    def __len__(self):
        return len(self.gens)

    def prior(self, prior, dim):
        if prior == "normal":
            return np.stack([g.standard_normal(dim) for g in self.gens])
        return np.stack([g.logistic(size=dim) for g in self.gens])

    def block(self, steps, dim):
        """``(normals (n, steps, dim), uniforms (n, steps, 2))``."""
        normals = np.stack([g.standard_normal((steps, dim)) for g in self.gens])
        uniforms = np.stack([g.random((steps, 2)) for g in self.gens])
        return normals, uniforms

    def observed_fill(self, x_obs, miss):
        out = x_obs.copy()
        for i, g in enumerate(self.gens):
            obs = np.flatnonzero(~miss[i])
            m = np.flatnonzero(miss[i])
            if obs.size and m.size:
                out[i, m] = x_obs[i, obs[g.integers(0, obs.size, size=m.size)]]
        return out


# --------------------------------------------------------------------------
# chains


@dataclass
class ChainTrace:
    """Per-checkpoint completions and cumulative acceptance counts.

    ``completions[k]`` is the projected point of every chain after
    ``checkpoints[k]`` proposals. Per-proposal records are only kept when the
    run asked for them.
    """

    checkpoints: np.ndarray
    completions: np.ndarray
    accepted_counts: np.ndarray
    incidents: np.ndarray
    accepted: np.ndarray | None = None
    log_target: np.ndarray | None = None

    def acceptance_rates(self):
        """Per-chain acceptance rate within each checkpoint window."""
        steps = np.diff(self.checkpoints)
        return np.diff(self.accepted_counts, axis=0) / steps[:, None]

    def to_csv(self, path, chain=0):
        if self.accepted is None:
            raise ValueError("trace was recorded without per-proposal data")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["proposal_index", "accepted", "log_target"])
            for i, (a, lt) in enumerate(zip(self.accepted[chain], self.log_target[chain])):
                w.writerow([i + 1, int(a), repr(float(lt))])

    def snapshots_to_csv(self, path, chain=0):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            dim = self.completions.shape[2]
            w.writerow(["proposal_index"] + [f"x{j}" for j in range(dim)])
            for k, step in enumerate(self.checkpoints):
                w.writerow([int(step)] + [repr(float(v)) for v in self.completions[k, chain]])


def _initial_latent(model, config, streams, x_obs, miss, init_latent):
    if config.init == "latent":
        if init_latent is None:
            raise ValueError("init='latent' needs init_latent")
        return np.broadcast_to(np.asarray(init_latent, dtype=np.float64), x_obs.shape).copy()
    z = config.init_scale * streams.prior(model.prior, model.dim)
    if config.init == "observed":
        filled = streams.observed_fill(x_obs, miss)
        has_obs = (~miss).any(axis=1)
        z = np.where(has_obs[:, None], _inverse_raw(model, filled), z)
    return z


def run_chains(model, x_obs, miss, config, seed, keys, checkpoint_every=None,
               record=False, init_latent=None, aux=None):
    """Run one PL-MCMC chain per row of ``x_obs``/``miss``.

    ``keys`` gives the stream key of every chain. Returns the final projected
    points ``(n, dim)`` and a :class:`ChainTrace`.
    """
    x_obs = np.asarray(x_obs, dtype=np.float64)
    miss = np.asarray(miss, dtype=bool)
    n, dim = x_obs.shape
    if dim != model.dim or miss.shape != x_obs.shape:
        raise ValueError("x_obs and miss must both be (n, model.dim)")
    if len(keys) != n:
        raise ValueError("need one stream key per chain")
    x_obs = np.where(miss, 0.0, x_obs)
    aux = config.aux if aux is None else aux
    streams = ChainStreams(seed, keys)
    target = _Target(model, x_obs, miss, aux)
    state = target.init_state(_initial_latent(model, config, streams, x_obs, miss, init_latent))

    total = config.proposals
    every = checkpoint_every or max(total, 1)
    ckpts, comps, counts = [0], [state.completion(x_obs, miss)], [state.accepted.copy()]
    acc_rec = np.zeros((n, total), dtype=bool) if record else None
    lt_rec = np.zeros((n, total)) if record else None

    done = 0
    while done < total:
        steps = min(_BLOCK, total - done)
        normals, uniforms = streams.block(steps, dim)
        for t in range(steps):
            xi_new, tags = _propose_from(state.xi, normals[:, t], uniforms[:, t, 0], config)
            accept, _ = _mh_update(state, target, xi_new, tags, uniforms[:, t, 1], config)
            done += 1
            if record:
                acc_rec[:, done - 1] = accept
                lt_rec[:, done - 1] = state.log_target
            if done % every == 0 or done == total:
                ckpts.append(done)
                comps.append(state.completion(x_obs, miss))
                counts.append(state.accepted.copy())
    trace = ChainTrace(np.array(ckpts), np.stack(comps), np.stack(counts),
                       state.incidents.copy(), acc_rec, lt_rec)
    return state.completion(x_obs, miss), trace


def run_chain(model, sample, config, seed=0, sample_index=0, chain_index=0,
              checkpoint_every=None, record=False, init_latent=None, aux=None):
    """Single chain; returns ``(values at the missing indices, trace)``."""
    if sample.missing.size == 0:
        x_obs, miss = sample.batch(1)
        empty = ChainTrace(np.array([0]), x_obs[None], np.zeros((1, 1), dtype=np.int64),
                           np.zeros(1, dtype=np.int64))
        return np.empty(0), empty
    x_obs, miss = sample.batch(1)
    final, trace = run_chains(model, x_obs, miss, config, seed, [(sample_index, chain_index, 0)],
                              checkpoint_every, record, init_latent, aux)
    return final[0, sample.missing], trace


def sample_conditional(model, sample, config, n_chains, seed=0, sample_index=0,
                       checkpoint_every=None, record=False, aux=None):
    """Final completions of ``n_chains`` independent chains, ``(n_chains, |M|)``."""
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    if sample.missing.size == 0:
        return np.empty((n_chains, 0)), None
    x_obs, miss = sample.batch(n_chains)
    keys = [(sample_index, c, 0) for c in range(n_chains)]
    final, trace = run_chains(model, x_obs, miss, config, seed, keys, checkpoint_every, record,
                              aux=aux)
    return final[:, sample.missing], trace


def conditional_mean(model, sample, config, n_chains, seed=0, sample_index=0):
    """Average of the final completions of ``n_chains`` independent chains."""
    draws, _ = sample_conditional(model, sample, config, n_chains, seed, sample_index)
    return draws.mean(axis=0)


def impute_rows(model, x_obs, miss, config, seed, round_index=0, n_chains=1,
                n_jobs=1, chunk_size=4096):
    """Final PL-MCMC completions for every row, ``(n_chains, n, dim)``.

    Complete rows are passed through untouched. Row ``i`` / chain ``c`` uses
    stream key ``(i, c, round_index)``, so chunking and threading never
    change the output.
    """
    x_obs = np.asarray(x_obs, dtype=np.float64)
    miss = np.asarray(miss, dtype=bool)
    out = np.broadcast_to(np.where(miss, 0.0, x_obs), (n_chains,) + x_obs.shape).copy()
    rows = np.flatnonzero(miss.any(axis=1))
    jobs = []
    for c in range(n_chains):
        for start in range(0, rows.size, chunk_size):
            jobs.append((c, rows[start:start + chunk_size]))

    def work(job):
        c, idx = job
        keys = [(int(i), c, round_index) for i in idx]
        final, _ = run_chains(model, x_obs[idx], miss[idx], config, seed, keys)
        return c, idx, final

    if n_jobs > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    for c, idx, final in results:
        out[c, idx] = final
    return out


# --------------------------------------------------------------------------
# data-space Gibbs baseline


@dataclass
class GibbsState:
    x: np.ndarray
    log_p: np.ndarray
    accepted: np.ndarray = field(default=None)
    proposed: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.x.shape[0]
        if self.accepted is None:
            self.accepted = np.zeros(n, dtype=np.int64)
        if self.proposed is None:
            self.proposed = np.zeros(n, dtype=np.int64)


def _normal_logpdf(v, mu, sigma):
    r = (v - mu) / sigma
    return -0.5 * r * r - np.log(sigma) - 0.5 * _LOG_2PI


def _check_stats(mu, sigma, dim):
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (dim,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (dim,))
    if np.any(~(sigma > 0)):
        raise ValueError("Gibbs proposal standard deviations must be positive")
    return mu, sigma


def gibbs_init(model, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return GibbsState(x.copy(), _log_prob_raw(model, x))


def _gibbs_coordinate(state, model, j, proposal, u, mu, sigma):
    x_new = state.x.copy()
    x_new[:, j] = proposal
    with np.errstate(over="ignore", invalid="ignore"):
        lp_new = _log_prob_raw(model, x_new)
        log_alpha = (lp_new - state.log_p
                     + _normal_logpdf(state.x[:, j], mu[j], sigma[j])
                     - _normal_logpdf(proposal, mu[j], sigma[j]))
    accept = _decide(log_alpha, u)
    state.x[accept, j] = proposal[accept]
    state.log_p = np.where(accept, lp_new, state.log_p)
    state.accepted += accept
    state.proposed += 1
    return accept


def gibbs_sweep(state, model, sample, mu, sigma, rng):
    """One Metropolis-within-Gibbs sweep over the missing coordinates.

    Coordinate ``j`` proposes from the independent ``N(mu[j], sigma[j]^2)`` and
    is accepted by the joint-density ratio with the proposal correction.
    ``state`` may be a :class:`GibbsState` or a completion array.
    """
    if not isinstance(state, GibbsState):
        state = gibbs_init(model, state)
    mu, sigma = _check_stats(mu, sigma, model.dim)
    n = state.x.shape[0]
    for j in sample.missing:
        proposal = mu[j] + sigma[j] * rng.standard_normal(n)
        _gibbs_coordinate(state, model, j, proposal, rng.random(n), mu, sigma)
    return state


def run_gibbs(model, sample, mu, sigma, proposals, seed, n_chains=1, sample_index=0,
              checkpoint_every=None, init_scale=1.0):
    """Batched Gibbs chains; one proposal = one coordinate update.

    Chains start from an unconditional flow sample with the observed entries
    overwritten. Returns ``(final completions, ChainTrace)``.
    """
    from .flow import forward
    mu, sigma = _check_stats(mu, sigma, model.dim)
    streams = ChainStreams(seed, [(sample_index, c, 1) for c in range(n_chains)])
    x_obs, miss = sample.batch(n_chains)
    x0 = forward(model, init_scale * streams.prior(model.prior, model.dim))[0]
    state = gibbs_init(model, np.where(miss, x0, x_obs))
    order = sample.missing
    every = checkpoint_every or max(proposals, 1)
    ckpts, comps, counts = [0], [state.x.copy()], [state.accepted.copy()]
    done = 0
    while done < proposals and order.size:
        steps = min(_BLOCK, proposals - done)
        normals, uniforms = streams.block(steps, 1)
        for t in range(steps):
            j = order[done % order.size]
            prop = mu[j] + sigma[j] * normals[:, t, 0]
            _gibbs_coordinate(state, model, j, prop, uniforms[:, t, 0], mu, sigma)
            done += 1
            if done % every == 0 or done == proposals:
                ckpts.append(done)
                comps.append(state.x.copy())
                counts.append(state.accepted.copy())
    trace = ChainTrace(np.array(ckpts), np.stack(comps), np.stack(counts),
                       np.zeros(n_chains, dtype=np.int64))
    return state.x, trace


# --------------------------------------------------------------------------
# diagnostics


def decision_change_probability(model, sample, config, seed=0, n_steps=None, n_chains=1,
                                alt_aux=None, sample_index=0):
    """How often an alternative auxiliary density would flip the chain's decisions.

    The chain runs under ``config``. At every proposal the acceptance
    decision under ``alt_aux`` (default: improper uniform) is evaluated with
    the same uniform draw. Returns the contradiction frequencies split by the
    primary decision, plus the underlying counts.
    """
    alt_aux = AuxiliaryDensity(None) if alt_aux is None else alt_aux
    n_steps = config.proposals if n_steps is None else n_steps
    x_obs, miss = sample.batch(n_chains)
    streams = ChainStreams(seed, [(sample_index, c, 2) for c in range(n_chains)])
    target = _Target(model, x_obs, miss, config.aux)
    state = target.init_state(_initial_latent(model, config, streams, x_obs, miss, None))
    n_acc = n_rej = changed_acc = changed_rej = 0
    done = 0
    while done < n_steps:
        steps = min(_BLOCK, n_steps - done)
        normals, uniforms = streams.block(steps, model.dim)
        for t in range(steps):
            xi_new, tags = _propose_from(state.xi, normals[:, t], uniforms[:, t, 0], config)
            u = uniforms[:, t, 1]
            y_new, logdet_new, log_p_new, log_q_new = target.evaluate(xi_new)
            with np.errstate(invalid="ignore", over="ignore"):
                shared = ((log_p_new - state.log_p) + (logdet_new - state.logdet)
                          + log_kernel_ratio(state.xi, xi_new, tags, config))
                alt_delta = (alt_aux.log_kernel(y_new, x_obs, miss)
                             - alt_aux.log_kernel(state.y, x_obs, miss))
                log_alpha = (log_q_new - state.log_q) + shared
                alt_log_alpha = alt_delta + shared
            accept = _decide(log_alpha, u)
            alt_accept = _decide(alt_log_alpha, u)
            state.incidents += ~np.isfinite(log_alpha)
            _apply(state, accept, xi_new, y_new, logdet_new, log_p_new, log_q_new)
            flipped = accept != alt_accept
            n_acc += int(accept.sum())
            n_rej += int((~accept).sum())
            changed_acc += int((flipped & accept).sum())
            changed_rej += int((flipped & ~accept).sum())
            done += 1
    return {
        "p_change_given_accept": changed_acc / n_acc if n_acc else 0.0,
        "p_change_given_reject": changed_rej / n_rej if n_rej else 0.0,
        "n_accepted": n_acc,
        "n_rejected": n_rej,
        "n_changed_accepted": changed_acc,
        "n_changed_rejected": changed_rej,
    }
