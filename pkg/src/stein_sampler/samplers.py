"""Point-set generators: Stein-MPMC, SVGD, greedy Stein Points and IID."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .density import BOX_EPS, OPEN_UNIT_BOX, ScoredDensity
from .errors import ConfigError, DegenerateSetError, DivergenceError
from .stein_kernel import KernelConfig, ksd_and_bandwidth, median_bandwidth, reference_bandwidth

log = logging.getLogger(__name__)


def _rng(rng, seed):
    return rng if rng is not None else np.random.default_rng(seed)


def iid_baseline(density: ScoredDensity, n: int, rng: np.random.Generator) -> np.ndarray:
    return density.sample(n, rng)


# --- Stein-MPMC -----------------------------------------------------------


@dataclass(frozen=True)
class MPMCTrainConfig:
    epochs: int = 50_000
    lr: float = 1e-3
    weight_decay: float = 1e-5
    hidden: int = 64
    layers: int = 3
    target_degree: int = 10
    eval_every: int = 100
    # rescale the encoder and least-squares fit the decoder before training
    calibrate: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="epochs")
        if not 0 < self.lr < 1:
            raise ConfigError("learning rate must lie in (0, 1)", key="lr")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0", key="weight_decay")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1", key="eval_every")

    def model_config(self, density: ScoredDensity) -> nn.ModelConfig:
        return nn.ModelConfig.for_density(
            density, layers=self.layers, hidden=self.hidden, target_degree=self.target_degree
        )


@dataclass
class MPMCResult:
    points: np.ndarray
    loss_trace: list[float]
    best_epoch: int
    best_loss: float
    bandwidth: float
    inputs: np.ndarray
    params: dict[str, np.ndarray]
    model: nn.ModelConfig
    # (epoch, loss) at every evaluation
    history: list[tuple[int, float]] = field(default_factory=list)
    # epoch at which training blew up and was stopped, if it did
    diverged_at: int | None = None


def stein_mpmc(density: ScoredDensity, n: int, config: MPMCTrainConfig = MPMCTrainConfig(), rng=None) -> MPMCResult:
    """Train the message-passing transport on the squared KSD of its output.

    Inputs are ``n`` IID draws from ``density``; the radius graph is built
    on them once.  Every ``eval_every`` epochs (and after the last step) the
    current output is compared with the best so far, and the best one is
    returned.

    If the loss turns non-finite or the outputs collapse onto one point,
    training stops there: the best snapshot is returned with
    ``diverged_at`` set, or :class:`DivergenceError` is raised when no
    snapshot exists yet.
    """
    if n < 2:
        raise ConfigError("Stein-MPMC needs at least 2 points", key="N")
    rng = _rng(rng, config.seed)
    model = config.model_config(density)
    if density.support == OPEN_UNIT_BOX and model.squash != nn.LOGISTIC:
        raise ConfigError("bounded targets require the logistic output squash", key="squash")
    inputs = density.sample(n, rng)
    params = nn.init_params(model, rng)
    radius = model.radius or nn.select_radius(inputs, model.target_degree)
    edges = nn.build_radius_graph(inputs, radius)
    if config.calibrate:
        params = nn.calibrate_to_identity(inputs, params, edges, model)
    state = nn.AdamState.zeros_like(params)
    policy = KernelConfig()

    trace: list[float] = []
    history: list[tuple[int, float]] = []
    best = (math.inf, -1, None, None, None)
    diverged_at = None

    def consider(epoch, loss, out, h, p):
        nonlocal best
        history.append((epoch, loss))
        if loss < best[0]:
            best = (loss, epoch, out.copy(), h, p)

    def blew_up(epoch, exc):
        if best[2] is None:
            raise DivergenceError(f"Stein-MPMC diverged at epoch {epoch}: {exc}", step=epoch, where=getattr(exc, "where", None)) from exc
        log.warning("Stein-MPMC diverged at epoch %d (%s); keeping the epoch-%d snapshot", epoch, exc, best[1])
        return epoch

    for epoch in range(config.epochs):
        try:
            loss, grads, out, h = nn.loss_step(inputs, params, edges, model, density, policy)
            trace.append(loss)
            if epoch % config.eval_every == 0:
                consider(epoch, loss, out, h, params)
            params, state = nn.adam_step(params, grads, state, config.lr, config.weight_decay)
        except (DivergenceError, DegenerateSetError) as exc:
            diverged_at = blew_up(epoch, exc)
            break
    else:
        try:
            out = nn.model_forward(inputs, params, edges, model)
            final_ksd, h = ksd_and_bandwidth(out, density, policy)
            consider(config.epochs, final_ksd**2, out, h, params)
        except (DivergenceError, DegenerateSetError) as exc:
            diverged_at = blew_up(config.epochs, exc)

    best_loss, best_epoch, points, h, best_params = best
    log.debug("stein_mpmc N=%d best epoch %d, loss %.6g", n, best_epoch, best_loss)
    return MPMCResult(points, trace, best_epoch, best_loss, h, inputs, best_params, model, history, diverged_at)


# --- SVGD -----------------------------------------------------------------


@dataclass(frozen=True)
class SVGDConfig:
    step_size: float = 1e-3
    iterations: int = 50_000
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError("step size must be positive", key="step_size")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0", key="iterations")


def _reflect_into_box(x: np.ndarray) -> np.ndarray:
    lo, hi = BOX_EPS, 1.0 - BOX_EPS
    x = np.where(x < lo, 2 * lo - x, x)
    x = np.where(x > hi, 2 * hi - x, x)
    return np.clip(x, lo, hi)


def svgd_direction(x: np.ndarray, s: np.ndarray, h: float) -> np.ndarray:
    """Kernelised Stein direction ``(1/N) sum_j k(x_j, x_i) s_j + grad_{x_j} k(x_j, x_i)``."""
    n = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    K = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * h * h))
    repulsion = (x * K.sum(axis=1)[:, None] - K @ x) / (h * h)
    return (K @ s + repulsion) / n


def svgd(density: ScoredDensity, n: int, config: SVGDConfig = SVGDConfig(), rng=None, init=None) -> np.ndarray:
    """Stein variational gradient descent from ``n`` IID draws (or ``init``)."""
    rng = _rng(rng, config.seed)
    x = density.sample(n, rng) if init is None else np.array(init, dtype=np.float64)
    bounded = density.support == OPEN_UNIT_BOX
    for it in range(config.iterations):
        # one particle: k(x, x) = 1 and its gradient vanishes, so h is immaterial
        h = median_bandwidth(x) if len(x) > 1 else 1.0
        x = x + config.step_size * svgd_direction(x, density.score(x), h)
        if bounded:
            x = _reflect_into_box(x)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"SVGD produced non-finite particles at iteration {it}", step=it)
    return x


# --- Stein Points ---------------------------------------------------------


@dataclass(frozen=True)
class SteinPointsConfig:
    lr: float = 0.01
    inner_iterations: int = 200
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0 or self.inner_iterations < 1 or self.restarts < 1:
            raise ConfigError("Stein Points lr, inner_iterations and restarts must be positive", key="stein_points")


@dataclass
class SteinPointsResult:
    points: np.ndarray
    trace: dict[int, float]
    bandwidths: dict[int, float]
    reference_bandwidth: float
    # seconds from the start of the run until each checkpoint was reached
    elapsed: dict[int, float] = field(default_factory=dict)


def greedy_objective(c: Tensor, fixed: np.ndarray, fixed_scores: np.ndarray, density: ScoredDensity, h: float) -> Tensor:
    """Per-candidate ``k0(c, c)/2 + sum_i k0(X_i, c)`` for candidates ``c`` (R x d)."""
    s = ad.score(c, density)
    diag = 0.5 * ((s * s).sum(axis=1) + c.shape[1] / (h * h))
    if len(fixed) == 0:
        return diag
    gram = nn.stein_gram(Tensor(fixed), Tensor(fixed_scores), c, s, h)
    return diag + gram.sum(axis=0)


def _minimize_candidates(starts, fixed, fixed_scores, density, h, config: SteinPointsConfig):
    """Independent Adam runs from each start; returns the best iterate seen overall."""
    bounded = density.support == OPEN_UNIT_BOX
    c = starts.copy()
    m = np.zeros_like(c)
    v = np.zeros_like(c)
    alive = np.ones(len(c), dtype=bool)
    best_val = np.full(len(c), np.inf)
    best_pos = c.copy()
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, config.inner_iterations + 2):
        ct = Tensor(c, requires_grad=True)
        # rows are independent, so a diverged restart cannot poison the others
        with np.errstate(all="ignore"):
            J = greedy_objective(ct, fixed, fixed_scores, density, h)
            J.sum().backward()
        vals = J.data
        g = ct.grad
        alive &= np.isfinite(vals) & np.all(np.isfinite(g), axis=1)
        improved = alive & (vals < best_val)
        best_val[improved] = vals[improved]
        best_pos[improved] = c[improved]
        if t > config.inner_iterations or not alive.any():
            break
        g = np.where(alive[:, None], g, 0.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        c = c - config.lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        if bounded:
            c = np.clip(c, BOX_EPS, 1 - BOX_EPS)
    if not np.isfinite(best_val).any():
        raise DivergenceError("every Stein Points restart diverged")
    k = int(np.argmin(best_val))
    return best_pos[k], float(best_val[k])


def stein_points(
    density: ScoredDensity,
    n_max: int,
    config: SteinPointsConfig = SteinPointsConfig(),
    rng=None,
    checkpoints: Sequence[int] = (),
) -> SteinPointsResult:
    """Greedy sequential KSD minimisation, recording the KSD at ``checkpoints``.

    The bandwidth for placing point ``n`` is the median heuristic of the
    ``n - 1`` points already placed, or of an IID reference sample while
    fewer than two exist, and it is held fixed during the inner search.
    """
    if n_max < 1:
        raise ConfigError("n_max must be >= 1", key="N")
    checkpoints = sorted(set(int(c) for c in checkpoints))
    if checkpoints and (checkpoints[0] < 1 or checkpoints[-1] > n_max):
        raise ConfigError(f"checkpoints must lie in 1..{n_max}", key="checkpoints")
    rng = _rng(rng, config.seed)
    h_ref = reference_bandwidth(density, rng.spawn(1)[0])
    d = density.dim
    pts = np.empty((0, d))
    scores = np.empty((0, d))
    trace: dict[int, float] = {}
    bandwidths: dict[int, float] = {}
    policy = KernelConfig()
    elapsed: dict[int, float] = {}
    start = time.perf_counter()
    for n in range(1, n_max + 1):
        h = median_bandwidth(pts) if len(pts) >= 2 else h_ref
        starts = density.sample(config.restarts, rng)
        if len(pts):
            starts = np.vstack([starts, pts[-1:]])
        new, _ = _minimize_candidates(starts, pts, scores, density, h, config)
        pts = np.vstack([pts, new])
        scores = np.vstack([scores, density.score(new)])
        if n in checkpoints:
            try:
                trace[n], bandwidths[n] = ksd_and_bandwidth(pts, density, policy, fallback_bandwidth=h_ref)
            except DegenerateSetError:
                raise DivergenceError(f"Stein Points collapsed onto repeated points at n={n}", step=n) from None
            elapsed[n] = time.perf_counter() - start
    return SteinPointsResult(pts, trace, bandwidths, h_ref, elapsed)
