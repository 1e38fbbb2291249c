"""Imputation scores and acceptance-rate summaries."""
from __future__ import annotations

import hashlib
import json

import numpy as np


def _rows(imputations, truths, masks):
    imp = np.asarray(imputations, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    m = np.asarray(masks, dtype=bool)
    if not (imp.shape == tru.shape == m.shape) or imp.ndim != 2:
        raise ValueError("imputations, truths and masks must share one 2-d shape")
    counts = m.sum(axis=1)
    keep = counts > 0
    if not keep.any():
        raise ValueError("no missing entries: metric undefined")
    return imp[keep], tru[keep], m[keep], counts[keep]


def reconstruction_rmse(imputations, truths, masks):
    """Mean over examples of the RMSE across that example's missing entries."""
    imp, tru, m, counts = _rows(imputations, truths, masks)
    sq = np.where(m, (tru - imp) ** 2, 0.0).sum(axis=1) / counts
    return float(np.mean(np.sqrt(sq)))


def nmse(imputations, truths, masks, true_sigmas):
    """Per-example mean of squared errors scaled by the ground-truth attribute std."""
    imp, tru, m, counts = _rows(imputations, truths, masks)
    sig = np.asarray(true_sigmas, dtype=np.float64)
    if sig.shape != (imp.shape[1],) or np.any(sig <= 0):
        raise ValueError("true_sigmas must be one positive value per attribute")
    sq = np.where(m, ((tru - imp) / sig) ** 2, 0.0).sum(axis=1) / counts
    return float(np.mean(sq))


def mean_imputation(values, masks):
    """Fill each missing entry with its attribute's observed mean."""
    v = np.asarray(values, dtype=np.float64)
    m = np.asarray(masks, dtype=bool)
    obs = ~m
    means = np.where(obs, v, 0.0).sum(axis=0) / obs.sum(axis=0)
    return np.where(m, means, v)


def acceptance_summary(traces):
    """Mean and std of the per-window acceptance rate at every checkpoint.

    ``traces`` is one :class:`~plmcmc.sampler.ChainTrace` or a list of them
    sharing checkpoints; chains from all traces are pooled.
    """
    if not isinstance(traces, (list, tuple)):
        traces = [traces]
    if not traces:
        raise ValueError("no traces given")
    ckpts = traces[0].checkpoints
    if ckpts.size < 2:
        raise ValueError("trace holds no proposals")
    for t in traces[1:]:
        if not np.array_equal(t.checkpoints, ckpts):
            raise ValueError("traces must share checkpoints")
    rates = np.concatenate([t.acceptance_rates() for t in traces], axis=1)
    return {"checkpoints": ckpts[1:].copy(), "mean": rates.mean(axis=1), "std": rates.std(axis=1)}


# where a run writes and how many threads it uses never change its results
_NON_SEMANTIC = ("output_dir", "out", "threads")


def config_digest(config):
    if isinstance(config, dict):
        config = {k: v for k, v in config.items() if k not in _NON_SEMANTIC}
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def metric_report(metric, value, n_examples, config):
    return {"metric": metric, "value": float(value), "n_examples": int(n_examples),
            "config_digest": config_digest(config)}
