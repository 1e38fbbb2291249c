"""Shared test oracles."""
import numpy as np

from plmcmc.flow import build_flow, log_prob

FD_STEP = 1e-5
FD_RTOL = 1e-4
# gradients smaller than this are compared absolutely (relative error is
# meaningless for entries that vanish, e.g. dead ReLU units)
FD_FLOOR = 1e-5


def fd_relative_errors(model, batch, grads, coords):
    """Central differences of the mean NLL at ``(array index, flat index)`` pairs."""
    params = model.parameters()
    errs = []
    for a, k in coords:
        p = params[a].reshape(-1)
        old = p[k]
        p[k] = old + FD_STEP
        up = -log_prob(model, batch).mean()
        p[k] = old - FD_STEP
        down = -log_prob(model, batch).mean()
        p[k] = old
        fd = (up - down) / (2 * FD_STEP)
        an = grads[a].reshape(-1)[k]
        errs.append(abs(an - fd) / max(abs(an), abs(fd), FD_FLOOR))
    return np.array(errs)


def random_case(rng, dim, prior=None):
    """A random flow with perturbed biases/scales plus a small batch of points."""
    prior = prior or rng.choice(["normal", "logistic"])
    m = build_flow(dim, int(rng.integers(1, 5)), int(rng.integers(3, 12)),
                   int(rng.integers(0, 3)), str(prior), seed=int(rng.integers(1 << 30)))
    for layer in m.couplings:
        for b in layer.net.biases:
            b += rng.normal(0, 0.3, b.shape)
    m.log_scale = rng.normal(0, 0.4, dim)
    batch = rng.standard_normal((int(rng.integers(1, 6)), dim)) * 1.5
    return m, batch


def pick_coords(model, rng, n_random=4):
    """Every log-scale entry plus a few random weight/bias entries."""
    params = model.parameters()
    last = len(params) - 1
    coords = [(last, k) for k in range(params[last].size)]
    for _ in range(n_random):
        a = int(rng.integers(0, len(params)))
        if params[a].size:
            coords.append((a, int(rng.integers(0, params[a].size))))
    return coords
