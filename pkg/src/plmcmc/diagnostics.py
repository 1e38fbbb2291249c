"""Sampler-efficiency study: conditional-mean RMSE and acceptance envelopes.

Every setting is replicated; each replication averages ``n_chains``
independent chains at every checkpoint and scores that estimate against a
reference vector. PL-MCMC proposals cost two flow transformations and Gibbs
proposals one, which the ``transformations`` column records so settings can
be compared at equal cost.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .sampler import (UNIFORM, AuxiliaryDensity, SamplerConfig, decision_change_probability,
                      run_gibbs, sample_conditional)

ENVELOPE_COLUMNS = ["method", "label", "sigma_a", "sigma_p", "sigma_r", "checkpoint",
                    "proposals", "transformations", "rmse_mean", "rmse_std",
                    "acceptance_mean", "acceptance_std", "replications"]
DECISION_COLUMNS = ["label", "sigma_a", "alt_sigma_a", "p_change_given_accept",
                    "p_change_given_reject", "n_accepted", "n_rejected",
                    "n_changed_accepted", "n_changed_rejected"]


@dataclass(frozen=True)
class Setting:
    label: str
    method: str  # "plmcmc" or "gibbs"
    config: SamplerConfig | None = None  # Gibbs reads only init_scale

    @property
    def cost_per_proposal(self):
        return 2 if self.method == "plmcmc" else 1


def _rmse(estimate, reference, scale=None):
    diff = estimate - reference
    if scale is not None:
        diff = diff * scale
    return np.sqrt(np.mean(diff ** 2, axis=-1))


def run_setting(model, sample, setting, reference, n_chains, replications, transformations,
                checkpoint_every, gibbs_stats=None, seed=0, scale=None):
    """RMSE/acceptance arrays of shape ``(replications, n_checkpoints)``.

    ``transformations`` and ``checkpoint_every`` are both counted in flow
    transformations so every setting lands on the same checkpoint grid.
    ``scale`` (one factor per missing coordinate) converts errors back to
    original units when the model works on whitened data.
    """
    cost = setting.cost_per_proposal
    if transformations % cost or checkpoint_every % cost:
        raise ValueError("budget and checkpoint interval must be multiples of the proposal cost")
    proposals = transformations // cost
    every = checkpoint_every // cost
    rmse, acc = [], []
    for rep in range(replications):
        if setting.method == "gibbs":
            if gibbs_stats is None:
                raise ValueError("Gibbs baseline needs per-coordinate (mu, sigma)")
            init_scale = 1.0 if setting.config is None else setting.config.init_scale
            _, trace = run_gibbs(model, sample, gibbs_stats[0], gibbs_stats[1], proposals, seed,
                                 n_chains, sample_index=rep, checkpoint_every=every,
                                 init_scale=init_scale)
        else:
            cfg = setting.config.replace(proposals=proposals)
            _, trace = sample_conditional(model, sample, cfg, n_chains, seed, sample_index=rep,
                                          checkpoint_every=every)
        est = trace.completions[:, :, sample.missing].mean(axis=1)
        rmse.append(_rmse(est, reference, scale))
        acc.append(trace.acceptance_rates().mean(axis=1))
    ckpts = trace.checkpoints
    return ckpts, np.array(rmse), np.array(acc)


def envelope_study(model, sample, settings, reference, n_chains=100, replications=10,
                   transformations=4000, checkpoint_every=200, gibbs_stats=None, seed=0,
                   scale=None):
    """Rows (dicts keyed by :data:`ENVELOPE_COLUMNS`) plus raw per-setting arrays."""
    rows, raw = [], {}
    for s in settings:
        ckpts, rmse, acc = run_setting(model, sample, s, reference, n_chains, replications,
                                       transformations, checkpoint_every, gibbs_stats, seed, scale)
        raw[s.label] = {"proposals": ckpts, "rmse": rmse, "acceptance": acc}
        cfg = s.config if s.method == "plmcmc" else None
        for k, step in enumerate(ckpts):
            a = acc[:, k - 1] if k > 0 else np.full(replications, np.nan)
            rows.append({
                "method": s.method,
                "label": s.label,
                "sigma_a": "" if cfg is None else cfg.sigma_a,
                "sigma_p": "" if cfg is None else cfg.sigma_p,
                "sigma_r": "" if cfg is None else cfg.sigma_r,
                "checkpoint": k,
                "proposals": int(step),
                "transformations": int(step) * s.cost_per_proposal,
                "rmse_mean": float(rmse[:, k].mean()),
                "rmse_std": float(rmse[:, k].std()),
                "acceptance_mean": float(np.mean(a)) if k > 0 else "",
                "acceptance_std": float(np.std(a)) if k > 0 else "",
                "replications": replications,
            })
    return rows, raw


def decision_change_rows(model, sample, settings, n_steps, n_chains, seed=0,
                         alt_sigma_a=UNIFORM):
    alt = AuxiliaryDensity(None if alt_sigma_a == UNIFORM else float(alt_sigma_a))
    rows = []
    for s in settings:
        if s.method != "plmcmc":
            continue
        res = decision_change_probability(model, sample, s.config, seed, n_steps, n_chains, alt)
        rows.append({"label": s.label, "sigma_a": s.config.sigma_a, "alt_sigma_a": alt_sigma_a, **res})
    return rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})
