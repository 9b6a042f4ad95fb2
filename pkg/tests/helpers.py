"""Finite-difference gradient check for the transport network's KSD loss."""

import math

import numpy as np

from stein_sampler import density, nn
from stein_sampler.stein_kernel import KernelConfig

FD_STEP = 1e-5
TINY = nn.ModelConfig(dim=2, layers=1, hidden=8)


def random_params(config, rng):
    """Fan-in weights with nonzero biases, so no ReLU sits exactly on its kink."""
    params = nn.init_params(config, rng)
    shapes = nn.param_shapes(config)
    for name in params:
        if name.endswith(".b"):
            bound = 1.0 / math.sqrt(shapes[name[:-2] + ".W"][1])
            params[name] = rng.uniform(-bound, bound, size=params[name].shape)
    return params


def gradient_check(seed, config=TINY, n=10, step=FD_STEP):
    """Return ``(max relative error, kink crossings)`` over all parameters.

    The bandwidth is pinned to its value at the base point because the
    analytic gradient treats it as a constant.  The relative error uses a
    floor of 1e-6 times the largest gradient entry so that entries which are
    zero up to round-off do not dominate.
    """
    target = density.gaussian_mixture_2d()
    rng = np.random.default_rng(seed)
    pts = target.sample(n, rng)
    params = random_params(config, rng)
    edges = nn.build_radius_graph(pts, nn.select_radius(pts, config.target_degree))
    _, grads, _, h = nn.loss_step(pts, params, edges, config, target)
    pinned = KernelConfig.fixed(h)
    pattern = nn.relu_preactivations(pts, params, edges, config) > 0

    analytic, numeric, crossings = [], [], 0
    for name, value in params.items():
        for idx in np.ndindex(value.shape):
            losses = []
            for sign in (1.0, -1.0):
                moved = dict(params)
                moved[name] = value.copy()
                moved[name][idx] += sign * step
                if not np.array_equal(nn.relu_preactivations(pts, moved, edges, config) > 0, pattern):
                    crossings += 1
                losses.append(nn.ksd_loss_and_gradients(pts, moved, edges, config, target, pinned)[0])
            numeric.append((losses[0] - losses[1]) / (2 * step))
            analytic.append(grads[name][idx])
    a, f = np.array(analytic), np.array(numeric)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6 * np.abs(f).max())
    return float(np.max(np.abs(a - f) / scale)), crossings
