"""Target densities exposing log-density, score and score Jacobian.

Every evaluation method accepts either a single point of shape ``(d,)`` or a
batch of shape ``(n, d)`` and returns results with the matching leading
shape.  A point set is simply a finite ``(N, d)`` float64 array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import betaln, logsumexp

from .errors import ConfigError, DegenerateSetError, DomainError

UNBOUNDED = "unbounded"
OPEN_UNIT_BOX = "open-unit-box"

# Beta evaluations are refused within this distance of the box faces.
BOX_EPS = 1e-9


def as_point_set(points, dim: int | None = None) -> np.ndarray:
    """Validate and return ``points`` as a finite ``(N, d)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DegenerateSetError(f"expected an (N, d) array with N >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DegenerateSetError("point set contains non-finite entries")
    if dim is not None and arr.shape[1] != dim:
        raise ConfigError(f"point dimension {arr.shape[1]} does not match target dimension {dim}")
    return arr


def _batch(p) -> tuple[np.ndarray, bool]:
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    return (arr[None, :] if single else arr), single


class ScoredDensity:
    """Interface for targets usable by the Stein machinery.

    Subclasses set ``dim`` and ``support`` and implement the four evaluation
    methods below.
    """

    dim: int
    support: str

    def log_density(self, p) -> np.ndarray | float:
        raise NotImplementedError

    def score(self, p) -> np.ndarray:
        raise NotImplementedError

    def score_jacobian(self, p) -> np.ndarray:
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def to_spec(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class _Component:
    weight: float
    mean: np.ndarray
    chol: np.ndarray
    precision: np.ndarray
    log_norm: float


class GaussianMixture(ScoredDensity):
    """Finite mixture of Gaussians with general SPD covariances."""

    support = UNBOUNDED

    def __init__(self, weights: Sequence[float], means, covs):
        w = np.asarray(weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(means, dtype=np.float64))
        cov = np.asarray(covs, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        if w.ndim != 1 or len(w) == 0:
            raise ConfigError("weights must be a non-empty list", key="weights")
        if mu.shape[0] != len(w) or cov.shape[0] != len(w):
            raise ConfigError("weights, means and covs must have one entry per component", key="means")
        d = mu.shape[1]
        if cov.shape[1:] != (d, d):
            raise ConfigError(f"each covariance must be {d}x{d}", key="covs")
        if np.any(w <= 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must lie in (0, 1] and sum to 1", key="weights")

        self.dim = d
        self.weights = w
        self.means = mu
        self.covs = cov
        comps = []
        for k in range(len(w)):
            if not np.allclose(cov[k], cov[k].T, rtol=0, atol=1e-12):
                raise ConfigError(f"covariance {k} is not symmetric", key="covs")
            try:
                L = np.linalg.cholesky(cov[k])
            except np.linalg.LinAlgError:
                raise ConfigError(f"covariance {k} is not positive definite", key="covs") from None
            Linv = solve_triangular(L, np.eye(d), lower=True)
            log_norm = -0.5 * d * np.log(2 * np.pi) - np.sum(np.log(np.diag(L)))
            comps.append(_Component(w[k], mu[k], L, Linv.T @ Linv, log_norm))
        self._components = comps
        self._log_w = np.log(w)

    def _component_terms(self, x: np.ndarray):
        """Per-component log(w_k N_k(x)) of shape (K, n) and scores (K, n, d)."""
        logp = np.empty((len(self._components), x.shape[0]))
        scores = np.empty((len(self._components),) + x.shape)
        for k, c in enumerate(self._components):
            diff = x - c.mean
            z = solve_triangular(c.chol, diff.T, lower=True)
            logp[k] = self._log_w[k] + c.log_norm - 0.5 * np.sum(z * z, axis=0)
            scores[k] = -diff @ c.precision
        return logp, scores

    def log_density(self, p):
        x, single = _batch(p)
        logp, _ = self._component_terms(x)
        out = logsumexp(logp, axis=0)
        return float(out[0]) if single else out

    def _responsibilities(self, logp):
        return np.exp(logp - logsumexp(logp, axis=0, keepdims=True))

    def score(self, p):
        x, single = _batch(p)
        logp, scores = self._component_terms(x)
        r = self._responsibilities(logp)
        s = np.einsum("kn,knd->nd", r, scores)
        return s[0] if single else s

    def score_jacobian(self, p):
        x, single = _batch(p)
        logp, scores = self._component_terms(x)
        r = self._responsibilities(logp)
        s = np.einsum("kn,knd->nd", r, scores)
        H = -np.einsum("kn,kde->nde", r, np.stack([c.precision for c in self._components]))
        H += np.einsum("kn,knd,kne->nde", r, scores, scores)
        H -= np.einsum("nd,ne->nde", s, s)
        H = 0.5 * (H + np.swapaxes(H, 1, 2))
        return H[0] if single else H

    def sample(self, n: int, rng: np.random.Generator, return_labels: bool = False):
        """Draw a component per row, then ``mean + L z`` with ``L`` the Cholesky factor."""
        if n < 1:
            raise ConfigError(f"sample size must be >= 1, got {n}", key="n")
        labels = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k, c in enumerate(self._components):
            mask = labels == k
            out[mask] = c.mean + z[mask] @ c.chol.T
        return (out, labels) if return_labels else out

    def to_spec(self) -> dict[str, Any]:
        return {
            "target": "gaussian_mixture",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }


class BetaProduct(ScoredDensity):
    """Product of independent Beta marginals on the open unit box."""

    support = OPEN_UNIT_BOX

    def __init__(self, alphas: Sequence[float], betas: Sequence[float]):
        a = np.asarray(alphas, dtype=np.float64)
        b = np.asarray(betas, dtype=np.float64)
        if a.ndim != 1 or a.shape != b.shape or len(a) == 0:
            raise ConfigError("alphas and betas must be equal-length non-empty lists", key="alphas")
        if np.any(a <= 0) or np.any(b <= 0) or not np.all(np.isfinite(a + b)):
            raise ConfigError("Beta shape parameters must be positive", key="alphas")
        self.dim = len(a)
        self.alphas = a
        self.betas = b
        self._log_norm = -float(np.sum(betaln(a, b)))

    def _check(self, x: np.ndarray) -> None:
        bad = (x < BOX_EPS) | (x > 1 - BOX_EPS) | ~np.isfinite(x)
        if np.any(bad):
            i, j = np.argwhere(bad)[0]
            raise DomainError(
                f"point {i} coordinate {j} = {x[i, j]!r} is outside [{BOX_EPS}, 1 - {BOX_EPS}]",
                coordinate=int(j),
                index=int(i),
            )

    def log_density(self, p):
        x, single = _batch(p)
        self._check(x)
        out = self._log_norm + np.sum(
            (self.alphas - 1) * np.log(x) + (self.betas - 1) * np.log1p(-x), axis=1
        )
        return float(out[0]) if single else out

    def score(self, p):
        x, single = _batch(p)
        self._check(x)
        s = (self.alphas - 1) / x - (self.betas - 1) / (1 - x)
        return s[0] if single else s

    def score_jacobian(self, p):
        x, single = _batch(p)
        self._check(x)
        diag = -(self.alphas - 1) / x**2 - (self.betas - 1) / (1 - x) ** 2
        H = np.zeros(x.shape + (self.dim,))
        idx = np.arange(self.dim)
        H[:, idx, idx] = diag
        return H[0] if single else H

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ConfigError(f"sample size must be >= 1, got {n}", key="n")
        out = np.empty((n, self.dim))
        todo = np.arange(n)
        # Redraw the (astronomically rare) rows that land in the rejected margin.
        while len(todo):
            ga = rng.gamma(self.alphas, size=(len(todo), self.dim))
            gb = rng.gamma(self.betas, size=(len(todo), self.dim))
            x = ga / (ga + gb)
            out[todo] = x
            ok = np.all((x >= BOX_EPS) & (x <= 1 - BOX_EPS), axis=1)
            todo = todo[~ok]
        return out

    def to_spec(self) -> dict[str, Any]:
        return {"target": "beta_product", "alphas": self.alphas.tolist(), "betas": self.betas.tolist()}


def standard_normal(dim: int = 2) -> GaussianMixture:
    return GaussianMixture([1.0], np.zeros((1, dim)), np.eye(dim)[None])


def gaussian_mixture_2d() -> GaussianMixture:
    """Equal-weight mixture of unit Gaussians centred at (-1.5, 0) and (1.5, 0)."""
    return GaussianMixture([0.5, 0.5], [[-1.5, 0.0], [1.5, 0.0]], [np.eye(2), np.eye(2)])


def beta_product_2d() -> BetaProduct:
    """Beta(2, 4) x Beta(2, 4) on the unit square."""
    return BetaProduct([2.0, 2.0], [4.0, 4.0])


PRESETS = {
    "standard_normal": standard_normal,
    "gaussian_mixture_2d": gaussian_mixture_2d,
    "beta_product_2d": beta_product_2d,
}

_SPEC_KEYS = {
    "gaussian_mixture": {"target", "weights", "means", "covs"},
    "beta_product": {"target", "alphas", "betas"},
}


def from_spec(spec) -> ScoredDensity:
    """Build a density from a preset name or a JSON-style dict.

    >>> from_spec({"target": "beta_product", "alphas": [2, 2], "betas": [4, 4]}).dim
    2
    """
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise ConfigError(f"unknown target preset {spec!r}; choose from {sorted(PRESETS)}", key="target")
        return PRESETS[spec]()
    if not isinstance(spec, dict) or "target" not in spec:
        raise ConfigError("target spec must be a preset name or an object with a 'target' key", key="target")
    kind = spec["target"]
    if kind not in _SPEC_KEYS:
        raise ConfigError(f"unknown target type {kind!r}", key="target")
    extra = set(spec) - _SPEC_KEYS[kind]
    if extra:
        raise ConfigError(f"unknown key(s) in target spec: {sorted(extra)}", key=sorted(extra)[0])
    missing = _SPEC_KEYS[kind] - set(spec)
    if missing:
        raise ConfigError(f"missing key(s) in target spec: {sorted(missing)}", key=sorted(missing)[0])
    if kind == "gaussian_mixture":
        return GaussianMixture(spec["weights"], spec["means"], spec["covs"])
    return BetaProduct(spec["alphas"], spec["betas"])
