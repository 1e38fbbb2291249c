"""Reverse-mode gradients of the batch NLL, optimizers and complete-data training."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .flow import NonFiniteInputError, _as_batch, prior_dlogpdf, prior_logpdf

logger = logging.getLogger(__name__)


class NonFiniteUpdateError(FloatingPointError):
    """An optimizer step would have written non-finite parameters."""


def nll_and_grad(model, batch):
    """Mean negative log-likelihood of ``batch`` and its exact parameter gradient.

    Gradients are returned as a list aligned with ``model.parameters()``.
    """
    x, _ = _as_batch(model, batch, "batch")
    n = x.shape[0]
    if n == 0:
        raise ValueError("batch must contain at least one row")

    # inverse pass, keeping what the backward pass needs
    h = x * np.exp(-model.log_scale)
    scaled = h
    caches = []
    for layer in reversed(model.couplings):
        shift, inputs = layer.net.forward_cached(h[:, layer.cond_idx])
        caches.append(inputs)
        h = h.copy()
        h[:, layer.trans_idx] -= shift
    xi = h
    logp = prior_logpdf(model.prior, xi).sum(axis=1) - model.log_scale.sum()
    nll = -float(logp.mean())

    g = -prior_dlogpdf(model.prior, xi) / n
    layer_grads = []
    for layer, inputs in zip(model.couplings, caches[::-1]):
        # xi_trans = h_trans - net(h_cond)
        g_in, gw, gb = layer.net.backward(inputs, -g[:, layer.trans_idx])
        g = g.copy()
        g[:, layer.cond_idx] += g_in
        layer_grads.append((gw, gb))
    # scaled = x * exp(-s): d scaled / ds = -scaled; the -sum(s) term adds +1
    grad_log_scale = 1.0 - (g * scaled).sum(axis=0)

    grads = []
    for gw, gb in layer_grads:
        grads.extend(gw)
        grads.extend(gb)
    grads.append(grad_log_scale)
    return nll, grads


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


class Optimizer:
    """Shared bookkeeping: lazily built accumulators and a guarded step."""

    def __init__(self, lr):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.t = 0
        self.state = None

    def _init_state(self, params):
        raise NotImplementedError

    def _deltas(self, grads):
        raise NotImplementedError

    def step(self, model, grads):
        params = model.parameters()
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ValueError("gradients are not shape-congruent with the model")
        bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteUpdateError(
                f"non-finite gradient in parameter arrays {bad} at step {self.t + 1}")
        if self.state is None:
            self._init_state(params)
        saved = self.state, self.t
        self.t += 1
        deltas = self._deltas(grads)
        if not all(np.all(np.isfinite(p + d)) for p, d in zip(params, deltas)):
            self.state, self.t = saved
            raise NonFiniteUpdateError(f"update at step {self.t + 1} produced non-finite parameters")
        for p, d in zip(params, deltas):
            p += d
        return model


class RMSprop(Optimizer):
    """RMSprop with classical (heavy-ball) momentum on the scaled gradient."""

    def __init__(self, lr=1e-5, momentum=0.9, alpha=0.99, eps=1e-8):
        super().__init__(lr)
        self.momentum = momentum
        self.alpha = alpha
        self.eps = eps

    def _init_state(self, params):
        self.state = {"sq": [np.zeros_like(p) for p in params],
                      "buf": [np.zeros_like(p) for p in params]}

    def _deltas(self, grads):
        sq = [self.alpha * s + (1.0 - self.alpha) * g * g for s, g in zip(self.state["sq"], grads)]
        buf = [self.momentum * b + g / (np.sqrt(s) + self.eps)
               for b, g, s in zip(self.state["buf"], grads, sq)]
        self.state = {"sq": sq, "buf": buf}
        return [-self.lr * b for b in buf]


class Adamax(Optimizer):
    """Adamax: Adam with an infinity-norm second moment."""

    def __init__(self, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def _init_state(self, params):
        self.state = {"m": [np.zeros_like(p) for p in params],
                      "u": [np.zeros_like(p) for p in params]}

    def _deltas(self, grads):
        m = [self.beta1 * m + (1.0 - self.beta1) * g for m, g in zip(self.state["m"], grads)]
        u = [np.maximum(self.beta2 * u, np.abs(g)) for u, g in zip(self.state["u"], grads)]
        self.state = {"m": m, "u": u}
        step = self.lr / (1.0 - self.beta1 ** self.t)
        return [-step * mi / (ui + self.eps) for mi, ui in zip(m, u)]


def make_optimizer(kind="adamax", **kwargs):
    kinds = {"adamax": Adamax, "rmsprop": RMSprop}
    try:
        return kinds[kind.lower()](**kwargs)
    except KeyError:
        raise ValueError(f"unknown optimizer {kind!r}; choose from {sorted(kinds)}") from None


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    mean_nll: list = field(default_factory=list)

    def append(self, epoch, nll, path=None):
        self.epochs.append(epoch)
        self.mean_nll.append(nll)
        if path is not None:
            new = not _exists_nonempty(path)
            with open(path, "a", newline="") as fh:
                w = csv.writer(fh)
                if new:
                    w.writerow(["epoch", "mean_nll"])
                w.writerow([epoch, repr(float(nll))])


def _exists_nonempty(path):
    try:
        with open(path) as fh:
            return bool(fh.read(1))
    except FileNotFoundError:
        return False


def run_epoch(model, data, batch_size, optimizer, rng, clip_norm=None):
    """One shuffled mini-batch pass; returns the row-weighted mean batch NLL."""
    n = data.shape[0]
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, batch_size):
        rows = order[start:start + batch_size]
        nll, grads = nll_and_grad(model, data[rows])
        if clip_norm is not None:
            norm = global_norm(grads)
            if norm > clip_norm:
                grads = [g * (clip_norm / norm) for g in grads]
        optimizer.step(model, grads)
        total += nll * rows.size
    return total / n


def train(model, dataset, epochs, batch_size, optimizer, rng, clip_norm=None,
          log=None, log_path=None, epoch_offset=0):
    """Fit ``model`` in place on a complete data matrix.

    Returns ``(model, log)`` where ``log.mean_nll`` holds the per-epoch mean
    NLL accumulated over that epoch's mini-batches.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ValueError(f"dataset must be (n, {model.dim})")
    if not np.all(np.isfinite(data)):
        raise NonFiniteInputError("training data must be complete and finite")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch_size > data.shape[0]:
        warnings.warn(f"batch_size {batch_size} exceeds {data.shape[0]} rows; clamping",
                      stacklevel=2)
        batch_size = data.shape[0]
    log = TrainLog() if log is None else log
    for epoch in range(epochs):
        nll = run_epoch(model, data, batch_size, optimizer, rng, clip_norm)
        log.append(epoch_offset + epoch, nll, log_path)
        logger.debug("epoch %d mean nll %.6f", epoch_offset + epoch, nll)
    return model, log
