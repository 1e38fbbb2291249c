"""Independent correctness oracles.

Nothing here calls the flow's own inverse or log-density routines: affine
flows are reduced to ``(A, b)`` by probing the forward map and conditioned
with dense linear algebra, and the grid oracle recomputes the density with
its own layer loop, a finite-difference Jacobian and scipy's prior pdfs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .flow import forward


def affine_parameters(model):
    """``(A, b)`` such that ``forward(model, xi) == A @ xi + b`` for an affine flow."""
    b = forward(model, np.zeros(model.dim))[0]
    eye = np.eye(model.dim)
    A = (forward(model, eye)[0] - b).T
    return A, b


def gaussian_conditional(A, b, observed):
    """Condition ``N(b, A A^T)`` on ``{index: value}``.

    Returns ``(mean, cov)`` over the remaining coordinates in increasing
    index order.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = b.size
    if A.shape != (d, d):
        raise ValueError("A must be square and match b")
    if np.linalg.matrix_rank(A) < d:
        raise np.linalg.LinAlgError("A is singular")
    cov = A @ A.T
    o = np.array(sorted(observed), dtype=int)
    m = np.setdiff1d(np.arange(d), o)
    if o.size == 0:
        return b[m].copy(), cov[np.ix_(m, m)]
    x_o = np.array([observed[i] for i in o], dtype=np.float64)
    s_mo = cov[np.ix_(m, o)]
    s_oo = cov[np.ix_(o, o)]
    gain = np.linalg.solve(s_oo, s_mo.T).T
    mean = b[m] + gain @ (x_o - b[o])
    c = cov[np.ix_(m, m)] - gain @ s_mo.T
    return mean, 0.5 * (c + c.T)


def _relu_net(weights, biases, h):
    for k, (w, bias) in enumerate(zip(weights, biases)):
        h = np.einsum("ni,ij->nj", h, w) + bias
        if k < len(weights) - 1:
            h = h * (h > 0)
    return h


def _inverse_independent(model, x):
    h = x / np.exp(model.log_scale)
    for layer in model.couplings[::-1]:
        shift = _relu_net(layer.net.weights, layer.net.biases, h[:, layer.cond_idx])
        h = h.copy()
        h[:, layer.trans_idx] = h[:, layer.trans_idx] - shift
    return h


def _prior_logpdf(prior, z):
    if prior == "normal":
        return stats.norm.logpdf(z).sum(axis=1)
    return stats.logistic.logpdf(z).sum(axis=1)


def joint_logpdf_independent(model, x, step=1e-5):
    """Flow log density with a finite-difference Jacobian of the inverse."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    jac = np.empty((n, d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        jac[:, :, j] = (_inverse_independent(model, x + e) - _inverse_independent(model, x - e)) / (2 * step)
    _, logabsdet = np.linalg.slogdet(jac)
    return _prior_logpdf(model.prior, _inverse_independent(model, x)) + logabsdet


@dataclass
class GridConditional:
    """Normalized conditional on a regular grid over the missing coordinates."""

    axes: list
    probs: np.ndarray
    missing: np.ndarray

    @property
    def cell(self):
        return float(np.prod([a[1] - a[0] for a in self.axes]))

    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def mean(self):
        return self.probs.ravel() @ self.points()

    def cov(self):
        pts = self.points() - self.mean()
        return (pts * self.probs.ravel()[:, None]).T @ pts

    def density(self):
        return self.probs / self.cell


def _prior_std(prior):
    return 1.0 if prior == "normal" else np.pi / np.sqrt(3.0)


def grid_conditional(model, sample, bounds=None, resolution=2001, step=1e-5):
    """Brute-force ``p(y_M | x_O)`` on a grid, for at most two missing coordinates.

    ``bounds`` is ``(low, high)`` applied to every missing axis; the default
    spans +-8 prior standard deviations stretched by the largest scale.
    """
    m = np.asarray(sample.missing)
    if not 1 <= m.size <= 2:
        raise ValueError("grid oracle supports one or two missing coordinates")
    if bounds is None:
        half = 8.0 * _prior_std(model.prior) * float(np.exp(model.log_scale.max()))
        bounds = (-half, half)
    axes = [np.linspace(bounds[0], bounds[1], resolution) for _ in range(m.size)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    x = np.broadcast_to(np.where(sample.miss_mask, 0.0, sample.values), (pts.shape[0], sample.dim)).copy()
    x[:, m] = pts
    logp = joint_logpdf_independent(model, x, step)
    w = np.exp(logp - logp.max())
    probs = (w / w.sum()).reshape(mesh[0].shape)
    return GridConditional(axes, probs, m)


def total_variation(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


def _kl(p, q):
    return float(np.sum(p * (np.log(p) - np.log(q))))


def _check_joint(t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2 or np.any(t <= 0) or not np.isclose(t.sum(), 1.0, atol=1e-12):
        raise ValueError("joint tables must be 2-d, strictly positive and sum to 1")
    return t


def kl_decomposition_check(p_joint, q_joint):
    """Split ``KL(p_xy || q_xy)`` into expected conditional KL plus marginal KL.

    Rows index ``x``, columns ``y``. Returns ``(lhs, rhs, slack)`` with
    ``lhs = KL(p_xy || q_xy)``, ``rhs = E_x KL(p_y|x || q_y|x)`` and
    ``slack = lhs - rhs`` (which should equal ``KL(p_x || q_x)``).
    """
    p = _check_joint(p_joint)
    q = _check_joint(q_joint)
    lhs = _kl(p, q)
    p_x = p.sum(axis=1)
    q_x = q.sum(axis=1)
    p_cond = p / p_x[:, None]
    q_cond = q / q_x[:, None]
    rhs = float(sum(p_x[i] * _kl(p_cond[i], q_cond[i]) for i in range(p.shape[0])))
    return lhs, rhs, lhs - rhs


def marginal_kl(p_joint, q_joint):
    p = _check_joint(p_joint)
    q = _check_joint(q_joint)
    return _kl(p.sum(axis=1), q.sum(axis=1))


def imputation_kl_improvement_check(p_joint, q_joint, tol=1e-12):
    """``KL(p_xy || q_y|x p_x) <= KL(p_xy || q_xy)`` on discrete tables."""
    p = _check_joint(p_joint)
    q = _check_joint(q_joint)
    imputed = q / q.sum(axis=1, keepdims=True) * p.sum(axis=1, keepdims=True)
    return _kl(p, imputed) <= _kl(p, q) + tol
