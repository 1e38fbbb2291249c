"""NICE-style additive coupling flow with a diagonal scaling layer.

The generative direction maps a latent vector ``xi`` to data ``x``::

    x = exp(log_scale) * (C_K o ... o C_1)(xi)

Each coupling layer shifts one half of the coordinates by an MLP of the
other half. Which half is shifted alternates from layer to layer, while the
split itself is one random partition drawn when the flow is built.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1
PRIORS = ("logistic", "normal")
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class NonFiniteInputError(ValueError):
    """Raised when a flow evaluation receives NaN or infinite values."""


class MLP:
    """Fully connected network, rectifier on hidden layers, linear output."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights and biases must be non-empty and of equal length")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("inconsistent layer shapes")
        for w_in, w_out in zip(self.weights[:-1], self.weights[1:]):
            if w_in.shape[1] != w_out.shape[0]:
                raise ValueError("consecutive layer sizes do not match")

    @classmethod
    def init(cls, sizes, rng):
        # Glorot-uniform weights, zero biases.
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes):
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]])

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def __call__(self, h):
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def forward_cached(self, h):
        """Evaluate and keep every layer input for a later backward pass."""
        inputs = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h, inputs

    def backward(self, inputs, grad_out):
        """Return (grad wrt network input, weight grads, bias grads)."""
        n_layers = len(self.weights)
        grad_w = [None] * n_layers
        grad_b = [None] * n_layers
        g = grad_out
        for i in range(n_layers - 1, -1, -1):
            grad_w[i] = inputs[i].T @ g
            grad_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                # inputs[i] is the rectified output of layer i-1
                g = g * (inputs[i] > 0.0)
        return g, grad_w, grad_b

    def copy(self):
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class CouplingLayer:
    """Additive coupling ``y[trans] = x[trans] + net(x[cond])``."""

    net: MLP
    cond_idx: np.ndarray
    trans_idx: np.ndarray

    def forward(self, h):
        out = h.copy()
        out[:, self.trans_idx] += self.net(h[:, self.cond_idx])
        return out

    def inverse(self, h):
        out = h.copy()
        out[:, self.trans_idx] -= self.net(h[:, self.cond_idx])
        return out


@dataclass
class FlowModel:
    """Invertible map between latent and data space with an exact density.

    ``partition`` marks half A of the coordinates (``dim // 2`` entries set).
    Even-numbered couplings shift half B from half A, odd-numbered ones the
    reverse.
    """

    partition: np.ndarray
    couplings: list
    log_scale: np.ndarray
    prior: str = "normal"
    partition_seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.partition = np.asarray(self.partition, dtype=bool)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if self.partition.ndim != 1 or self.partition.size < 1:
            raise ValueError("partition must be a non-empty 1-d mask")
        if self.partition.sum() != self.dim // 2:
            raise ValueError("partition must select exactly dim // 2 coordinates")
        if self.log_scale.shape != (self.dim,):
            raise ValueError("log_scale must have one entry per dimension")

    @property
    def dim(self):
        return self.partition.size

    def parameters(self):
        """Parameter arrays in a fixed order; mutating them updates the model."""
        params = []
        for layer in self.couplings:
            params.extend(layer.net.weights)
            params.extend(layer.net.biases)
        params.append(self.log_scale)
        return params

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def copy(self):
        layers = [CouplingLayer(c.net.copy(), c.cond_idx.copy(), c.trans_idx.copy())
                  for c in self.couplings]
        return FlowModel(self.partition.copy(), layers, self.log_scale.copy(),
                         self.prior, self.partition_seed, dict(self.metadata))

    # JSON round trip -----------------------------------------------------

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "dim": int(self.dim),
            "prior": self.prior,
            "partition_seed": self.partition_seed,
            "partition": [int(b) for b in self.partition],
            "couplings": [
                {
                    "transforms": "A" if self.partition[c.trans_idx[0]] else "B",
                    "weights": [w.tolist() for w in c.net.weights],
                    "biases": [b.tolist() for b in c.net.biases],
                }
                for c in self.couplings
            ],
            "log_scale": self.log_scale.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc):
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema version {version!r}")
        partition = np.asarray(doc["partition"], dtype=bool)
        if partition.size != doc["dim"]:
            raise ValueError("partition length does not match dim")
        idx_a, idx_b = np.flatnonzero(partition), np.flatnonzero(~partition)
        couplings = []
        for spec in doc["couplings"]:
            if spec["transforms"] == "B":
                cond, trans = idx_a, idx_b
            elif spec["transforms"] == "A":
                cond, trans = idx_b, idx_a
            else:
                raise ValueError("coupling 'transforms' must be 'A' or 'B'")
            net = MLP([np.array(w, dtype=np.float64).reshape(len(w), -1) for w in spec["weights"]],
                      spec["biases"])
            if net.sizes[0] != cond.size or net.sizes[-1] != trans.size:
                raise ValueError("coupling network does not match the partition")
            couplings.append(CouplingLayer(net, cond, trans))
        return cls(partition, couplings, doc["log_scale"], doc["prior"],
                   doc.get("partition_seed"), dict(doc.get("metadata") or {}))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def random_partition(dim, rng):
    mask = np.zeros(dim, dtype=bool)
    mask[rng.permutation(dim)[: dim // 2]] = True
    return mask


def build_flow(dim, n_couplings=4, hidden=120, depth=5, prior="normal", seed=0,
               partition=None):
    """Build a randomly initialized flow.

    ``depth`` is the number of hidden layers in each coupling network; with
    ``depth=0`` every coupling is linear and the whole flow is affine.
    """
    if dim < 2:
        raise ValueError("a coupling flow needs dim >= 2")
    if n_couplings < 0 or depth < 0 or hidden < 1:
        raise ValueError("n_couplings, depth must be >= 0 and hidden >= 1")
    rng = np.random.default_rng(seed)
    if partition is None:
        partition = random_partition(dim, rng)
    partition = np.asarray(partition, dtype=bool)
    idx_a, idx_b = np.flatnonzero(partition), np.flatnonzero(~partition)
    couplings = []
    for i in range(n_couplings):
        cond, trans = (idx_a, idx_b) if i % 2 == 0 else (idx_b, idx_a)
        sizes = [cond.size] + [hidden] * depth + [trans.size]
        couplings.append(CouplingLayer(MLP.init(sizes, rng), cond, trans))
    return FlowModel(partition, couplings, np.zeros(dim), prior, seed)


def zero_flow(dim, n_couplings=2, hidden=4, depth=1, prior="normal"):
    """Flow whose every parameter is zero, i.e. the identity map."""
    partition = np.zeros(dim, dtype=bool)
    partition[: dim // 2] = True
    idx_a, idx_b = np.flatnonzero(partition), np.flatnonzero(~partition)
    couplings = []
    for i in range(n_couplings):
        cond, trans = (idx_a, idx_b) if i % 2 == 0 else (idx_b, idx_a)
        couplings.append(CouplingLayer(
            MLP.zeros([cond.size] + [hidden] * depth + [trans.size]), cond, trans))
    return FlowModel(partition, couplings, np.zeros(dim), prior, None)


def random_affine_flow(dim, rng, n_couplings=3, weight_scale=0.8, scale_spread=0.5):
    """Affine flow ``x = A xi + b`` built from linear couplings (test fixture)."""
    partition = random_partition(dim, rng)
    idx_a, idx_b = np.flatnonzero(partition), np.flatnonzero(~partition)
    couplings = []
    for i in range(n_couplings):
        cond, trans = (idx_a, idx_b) if i % 2 == 0 else (idx_b, idx_a)
        net = MLP([rng.normal(0.0, weight_scale, size=(cond.size, trans.size))],
                  [rng.normal(0.0, 1.0, size=trans.size)])
        couplings.append(CouplingLayer(net, cond, trans))
    log_scale = rng.uniform(-scale_spread, scale_spread, size=dim)
    return FlowModel(partition, couplings, log_scale, "normal", None)


def _as_batch(model, v, name):
    arr = np.asarray(v, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != model.dim:
        raise ValueError(f"{name} must have trailing dimension {model.dim}, got shape {np.shape(v)}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError(f"{name} contains non-finite values")
    return arr, single


def forward(model, xi):
    """Map latent -> data. Returns ``(x, logdet)`` with logdet of the Jacobian."""
    h, single = _as_batch(model, xi, "xi")
    for layer in model.couplings:
        h = layer.forward(h)
    x = h * np.exp(model.log_scale)
    logdet = np.full(h.shape[0], model.log_scale.sum())
    if single:
        return x[0], float(logdet[0])
    return x, logdet


def inverse(model, x):
    """Map data -> latent. Returns ``(xi, logdet)``, logdet = -forward logdet."""
    h, single = _as_batch(model, x, "x")
    h = h * np.exp(-model.log_scale)
    for layer in reversed(model.couplings):
        h = layer.inverse(h)
    logdet = np.full(h.shape[0], -model.log_scale.sum())
    if single:
        return h[0], float(logdet[0])
    return h, logdet


def prior_logpdf(prior, z):
    """Elementwise log density of the standard prior."""
    if prior == "normal":
        return -0.5 * z * z - _HALF_LOG_2PI
    # logistic: -z - 2 softplus(-z), stable for large |z|
    return -z - 2.0 * np.logaddexp(0.0, -z)


def prior_dlogpdf(prior, z):
    if prior == "normal":
        return -z
    return -np.tanh(0.5 * z)


def log_prob(model, x):
    """Exact log density of ``x`` under the flow (change of variables)."""
    xi, logdet = inverse(model, x)
    lp = prior_logpdf(model.prior, xi).sum(axis=-1)
    return lp + logdet


def sample_prior(model, n, scale=1.0, rng=None):
    """Draw ``n`` latent vectors from the prior with every coordinate scaled."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(rng)
    if model.prior == "normal":
        z = rng.standard_normal((n, model.dim))
    else:
        z = rng.logistic(size=(n, model.dim))
    return scale * z


def sample(model, n, scale=1.0, rng=None):
    """Unconditional data samples at the given latent scale."""
    return forward(model, sample_prior(model, n, scale, rng))[0]
