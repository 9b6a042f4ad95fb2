"""RBF base kernel, Langevin Stein kernel and kernel Stein discrepancy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist

from .density import ScoredDensity, as_point_set
from .errors import ConfigError, DegenerateSetError, NumericalInconsistencyError

MEDIAN = "median"
FIXED = "fixed"

# Radicands in [-RADICAND_TOL, 0) are treated as round-off and clamped.
RADICAND_TOL = 1e-12

REFERENCE_SAMPLE_SIZE = 100


def median_bandwidth(points) -> float:
    """Median heuristic ``h = sqrt(med^2 / (2 log(N + 1)))``.

    ``med`` is the median of the strictly pairwise (i < j) Euclidean
    distances and ``log`` is the natural logarithm.
    """
    x = as_point_set(points)
    n = x.shape[0]
    if n < 2:
        raise DegenerateSetError(f"median heuristic needs at least 2 points, got {n}")
    med = float(np.median(pdist(x)))
    if med == 0.0:
        raise DegenerateSetError("median pairwise distance is zero (coincident points)")
    return math.sqrt(med * med / (2.0 * math.log(n + 1)))


def reference_bandwidth(density: ScoredDensity, rng: np.random.Generator) -> float:
    """Median heuristic over a fresh IID reference sample, for sets with N < 2."""
    return median_bandwidth(density.sample(REFERENCE_SAMPLE_SIZE, rng))


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth policy: a fixed ``bandwidth`` or the per-set median heuristic."""

    policy: str = MEDIAN
    bandwidth: float | None = None

    def __post_init__(self):
        if self.policy == FIXED:
            h = self.bandwidth
            if h is None or not (math.isfinite(h) and h > 0):
                raise ConfigError(f"fixed bandwidth must be positive and finite, got {h!r}", key="bandwidth")
        elif self.policy != MEDIAN:
            raise ConfigError(f"unknown bandwidth policy {self.policy!r}", key="bandwidth")

    @classmethod
    def fixed(cls, h: float) -> KernelConfig:
        return cls(FIXED, float(h))

    @classmethod
    def from_spec(cls, spec) -> KernelConfig:
        """Parse ``"median"`` or ``{"fixed": h}``."""
        if spec == MEDIAN:
            return cls()
        if isinstance(spec, dict) and set(spec) == {FIXED}:
            return cls.fixed(spec[FIXED])
        raise ConfigError(f"bandwidth must be \"median\" or {{\"fixed\": h}}, got {spec!r}", key="bandwidth")

    def to_spec(self):
        return MEDIAN if self.policy == MEDIAN else {FIXED: self.bandwidth}

    def resolve(self, points, fallback: float | None = None) -> float:
        """Bandwidth for ``points``; ``fallback`` is used by the median policy when N < 2."""
        if self.policy == FIXED:
            return self.bandwidth
        if len(np.atleast_2d(points)) < 2:
            if fallback is None:
                raise DegenerateSetError("median heuristic needs N >= 2 and no fallback bandwidth was given")
            return fallback
        return median_bandwidth(points)


def rbf(x, y, h: float) -> float:
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-np.dot(diff, diff) / (2.0 * h * h)))


def rbf_derivatives(x, y, h: float):
    """Return ``(grad_x k, grad_y k, div_x.grad_y k)`` of the RBF kernel at (x, y)."""
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    h2 = h * h
    r2 = np.dot(diff, diff)
    k = np.exp(-r2 / (2.0 * h2))
    grad_x = -(diff / h2) * k
    grad_y = (diff / h2) * k
    div_grad = k * (len(diff) / h2 - r2 / (h2 * h2))
    return grad_x, grad_y, float(div_grad)


def _k0_from_parts(diff, sx, sy, h):
    # Shared by the pairwise and matrix paths.  The cross terms are added
    # to each other before the rest so that swapping (x, y) is bit-exact.
    h2 = h * h
    d = diff.shape[-1]
    r2 = np.sum(diff * diff, axis=-1)
    k = np.exp(-r2 / (2.0 * h2))
    g = diff / h2
    grad_x = -g * k[..., None]
    grad_y = g * k[..., None]
    div_grad = k * (d / h2 - r2 / (h2 * h2))
    cross = np.sum(grad_x * sy, axis=-1) + np.sum(grad_y * sx, axis=-1)
    return div_grad + cross + k * np.sum(sx * sy, axis=-1)


def stein_k0(x, y, h: float, density: ScoredDensity) -> float:
    """Langevin Stein kernel built on the RBF kernel with bandwidth ``h``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(_k0_from_parts(x - y, density.score(x), density.score(y), h))


def stein_cross_matrix(xs, ys, h: float, density: ScoredDensity) -> np.ndarray:
    """``K[i, j] = k0(xs[i], ys[j])`` for two point sets."""
    x = as_point_set(xs, density.dim)
    y = as_point_set(ys, density.dim)
    sx, sy = density.score(x), density.score(y)
    return _k0_from_parts(x[:, None, :] - y[None, :, :], sx[:, None, :], sy[None, :, :], h)


def stein_kernel_matrix(points, h: float, density: ScoredDensity) -> np.ndarray:
    """``K[i, j] = k0(X_i, X_j)``, evaluated on the upper triangle and mirrored."""
    x = as_point_set(points, density.dim)
    s = density.score(x)
    iu, ju = np.triu_indices(x.shape[0])
    vals = _k0_from_parts(x[iu] - x[ju], s[iu], s[ju], h)
    K = np.empty((x.shape[0], x.shape[0]))
    K[iu, ju] = vals
    K[ju, iu] = vals
    return K


def ksd_and_bandwidth(
    points,
    density: ScoredDensity,
    config: KernelConfig = KernelConfig(),
    fallback_bandwidth: float | None = None,
) -> tuple[float, float]:
    x = as_point_set(points, density.dim)
    h = config.resolve(x, fallback_bandwidth)
    K = stein_kernel_matrix(x, h, density)
    # fsum is exactly rounded, so the total does not depend on point order.
    total = math.fsum(K.ravel()) / (x.shape[0] ** 2)
    return math.sqrt(max(0.0, total)), h


def ksd(points, density: ScoredDensity, config: KernelConfig = KernelConfig(), fallback_bandwidth=None) -> float:
    """Kernel Stein discrepancy ``sqrt(mean_ij k0(X_i, X_j))``."""
    return ksd_and_bandwidth(points, density, config, fallback_bandwidth)[0]


def generalized_discrepancy(
    points,
    kernel: Callable[[np.ndarray, np.ndarray], float],
    kernel_mean: Callable[[np.ndarray], float],
    kernel_mean_mean: float,
) -> float:
    """Kernel discrepancy given the kernel mean embedding and its integral.

    ``kernel_mean(x)`` is the integral of ``kernel(., x)`` against the target
    and ``kernel_mean_mean`` the integral of ``kernel_mean``.  With a Stein
    kernel both vanish and this reduces to :func:`ksd`.
    """
    x = as_point_set(points)
    n = x.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    diag = [kernel(x[i], x[i]) for i in range(n)]
    off = [kernel(x[i], x[j]) for i, j in zip(iu, ju)]
    pair_sum = math.fsum(diag + off + off)
    mean_sum = math.fsum(kernel_mean(x[i]) for i in range(n))
    radicand = kernel_mean_mean - 2.0 * mean_sum / n + pair_sum / (n * n)
    if radicand < -RADICAND_TOL:
        raise NumericalInconsistencyError(f"discrepancy radicand is {radicand:.3e} < 0")
    return math.sqrt(max(0.0, radicand))


def mc_estimate(points, q: Callable[[np.ndarray], float]) -> float:
    """Sample-mean estimate of the integral of ``q``."""
    x = as_point_set(points)
    return math.fsum(float(q(p)) for p in x) / x.shape[0]
