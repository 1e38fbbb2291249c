"""Desk-scale 2-dim demo: a banana-shaped density and a shallow flow fit to it."""
from __future__ import annotations

import numpy as np

from .flow import build_flow
from .grad import Adamax, train


def banana_data(n, seed=0, curvature=0.7, noise=0.5):
    """``x0 ~ N(0, 1)``, ``x1 = curvature * (x0^2 - 1) + noise * N(0, 1)``."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(n)
    x1 = curvature * (x0 ** 2 - 1.0) + noise * rng.standard_normal(n)
    return np.column_stack([x0, x1])


def train_demo_model(seed=0, n=2000, epochs=150, hidden=16, depth=2, n_couplings=2):
    """Shallow additive flow fit to :func:`banana_data`; returns ``(model, data)``."""
    data = banana_data(n, seed)
    model = build_flow(2, n_couplings, hidden, depth, "normal", seed=seed,
                       partition=np.array([True, False]))
    train(model, data, epochs, 200, Adamax(lr=0.01), np.random.default_rng(seed))
    return model, data
