"""Message-passing network that transports a point set, and its KSD loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .density import OPEN_UNIT_BOX, ScoredDensity, as_point_set
from .errors import ConfigError, DivergenceError
from .stein_kernel import KernelConfig

IDENTITY = "identity"
LOGISTIC = "logistic"

SQUASH_EPS = 1e-6
# Number of linear maps in each of the two per-layer perceptrons.
MLP_DEPTH = 3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the transport network.

    ``radius`` fixes the neighbourhood radius; when ``None`` it is chosen
    from the inputs so that the median node degree is ``target_degree``.
    """

    dim: int = 2
    layers: int = 3
    hidden: int = 64
    squash: str = IDENTITY
    target_degree: int = 10
    radius: float | None = None

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1", key="layers")
        if self.hidden < 1 or self.dim < 1:
            raise ConfigError("hidden and dim must be positive", key="hidden")
        if self.squash not in (IDENTITY, LOGISTIC):
            raise ConfigError(f"unknown squash {self.squash!r}", key="squash")
        if self.target_degree < 1:
            raise ConfigError("target_degree must be >= 1", key="target_degree")
        if self.radius is not None and not self.radius > 0:
            raise ConfigError("radius must be positive", key="radius")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "layers": self.layers,
            "hidden": self.hidden,
            "squash": self.squash,
            "target_degree": self.target_degree,
            "radius": self.radius,
        }

    @classmethod
    def for_density(cls, density: ScoredDensity, **kwargs) -> ModelConfig:
        """Config with the squash matched to the density's support."""
        squash = LOGISTIC if density.support == OPEN_UNIT_BOX else IDENTITY
        return cls(dim=density.dim, squash=squash, **kwargs)


# --- graph ----------------------------------------------------------------


@dataclass
class GraphEdges:
    """Directed edges ``src -> dst``; messages are summed at ``dst``."""

    src: np.ndarray
    dst: np.ndarray
    n_nodes: int
    _ops: tuple | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.src)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))

    def operators(self):
        """Sparse (gather_src, gather_dst, scatter_to_dst) matrices."""
        if self._ops is None:
            e = len(self.src)
            ones = np.ones(e)
            rows = np.arange(e)
            shape = (e, self.n_nodes)
            g_src = sp.csr_matrix((ones, (rows, self.src)), shape=shape)
            g_dst = sp.csr_matrix((ones, (rows, self.dst)), shape=shape)
            self._ops = (g_src, g_dst, g_dst.T.tocsr())
        return self._ops

    def relabel(self, perm: np.ndarray) -> GraphEdges:
        """Edges after moving node ``perm[k]`` to position ``k``."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return GraphEdges(inv[self.src], inv[self.dst], self.n_nodes)


def build_radius_graph(points, r: float) -> GraphEdges:
    """Connect every ordered pair i != j with ``|X_i - X_j| <= r``."""
    if not r > 0:
        raise ConfigError(f"radius must be positive, got {r}", key="radius")
    x = as_point_set(points)
    dist = cdist(x, x)
    adj = dist <= r
    np.fill_diagonal(adj, False)
    dst, src = np.nonzero(adj)
    return GraphEdges(src.astype(np.int64), dst.astype(np.int64), x.shape[0])


def select_radius(points, target_degree: int) -> float:
    """Median over nodes of the distance to the ``target_degree``-th nearest neighbour."""
    x = as_point_set(points)
    n = x.shape[0]
    dist = cdist(x, x)
    if n - 1 <= target_degree:
        return float(dist.max())
    # column 0 of each sorted row is the zero self-distance
    kth = np.sort(dist, axis=1)[:, target_degree]
    return float(np.median(kth))


# --- parameters -----------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration order."""
    m, d = config.hidden, config.dim
    shapes: dict[str, tuple[int, ...]] = {"enc.W": (m, d), "enc.b": (m,)}
    for layer in range(config.layers):
        for net in ("psi", "phi"):
            fan_in = 2 * m
            for k in range(MLP_DEPTH):
                shapes[f"layer{layer}.{net}.{k}.W"] = (m, fan_in)
                shapes[f"layer{layer}.{net}.{k}.b"] = (m,)
                fan_in = m
    shapes["dec.W"] = (d, m)
    shapes["dec.b"] = (d,)
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Weights uniform on +-sqrt(1/fan_in), biases zero."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".W"):
            bound = math.sqrt(1.0 / shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


# Ridge strength for the decoder fit, relative to the mean eigenvalue of the normal equations.
DECODER_RIDGE = 1e-2


def _final_features(points, params, edges, config) -> np.ndarray:
    tp = {k: Tensor(v) for k, v in params.items()}
    x = _linear(Tensor(points), tp["enc.W"], tp["enc.b"])
    for layer in range(config.layers):
        x = mp_layer(x, edges, tp, f"layer{layer}")
    return x.data


def calibrate_to_identity(points, params, edges, config: ModelConfig, ridge: float = DECODER_RIDGE):
    """Rescale the encoder and refit the decoder so the network roughly reproduces ``points``.

    Fan-in initialisation shrinks activations through the ReLU layers, so
    the raw network sends every input to nearly the same place.  Two
    adjustments undo that without touching the message-passing weights:

    * the encoder weights are scaled so the last layer's features have unit
      RMS (exact when all biases are zero, because the network is then
      positively homogeneous);
    * the decoder is the ridge least-squares map from those features to the
      inputs, or to their logits when the logistic squash is on.

    Returns a new parameter dict.
    """
    x = as_point_set(points, config.dim)
    params = dict(params)
    rms = float(np.sqrt(np.mean(_final_features(x, params, edges, config) ** 2)))
    if not (np.isfinite(rms) and rms > 0):
        raise DivergenceError("cannot calibrate: final features are all zero or non-finite", where="init")
    params["enc.W"] = params["enc.W"] / rms
    params["enc.b"] = params["enc.b"] / rms
    feats = _final_features(x, params, edges, config)
    if config.squash == LOGISTIC:
        target = np.log(x) - np.log1p(-x)
    else:
        target = x
    A = np.hstack([feats, np.ones((len(feats), 1))])
    gram = A.T @ A
    lam = ridge * np.trace(gram) / gram.shape[0]
    coef = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), A.T @ target)
    params["dec.W"] = coef[:-1].T.copy()
    params["dec.b"] = coef[-1].copy()
    return params


def _linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return x @ W.T + b


def _mlp(x: Tensor, p: dict[str, Tensor], prefix: str, trace: list | None = None) -> Tensor:
    for k in range(MLP_DEPTH):
        x = _linear(x, p[f"{prefix}.{k}.W"], p[f"{prefix}.{k}.b"])
        if k < MLP_DEPTH - 1:
            if trace is not None:
                trace.append(x.data)
            x = x.relu()
    return x


def mp_layer(features: Tensor, edges: GraphEdges, params: dict[str, Tensor], prefix: str, trace: list | None = None) -> Tensor:
    """One message-passing update.

    Node ``i`` collects ``m_i = sum_j psi(x_i, x_j)`` over its neighbours and
    becomes ``phi(x_i, m_i)``.  Nodes without neighbours get ``m_i = 0``.

    psi is evaluated without materialising the ``(x_i, x_j)`` pairs: its first
    map is split into receiver and sender halves applied per node, and the
    neighbour sum is taken before its last (affine) map, which therefore
    contributes ``deg_i * b``.
    """
    features = ad.as_tensor(features)
    n, m = features.shape
    if edges.n_nodes != n:
        raise ConfigError(f"graph has {edges.n_nodes} nodes but features have {n} rows")
    w0 = params[f"{prefix}.psi.0.W"]
    if w0.shape[1] != 2 * m:
        raise ConfigError(f"{prefix}: psi expects {w0.shape[1] // 2} features, got {m}")
    last = MLP_DEPTH - 1
    if len(edges):
        g_src, g_dst, scatter = edges.operators()
        recv = features @ w0[:, :m].T
        send = features @ w0[:, m:].T
        hidden = ad.sparse_matmul(g_dst, recv) + ad.sparse_matmul(g_src, send) + params[f"{prefix}.psi.0.b"]
        for k in range(1, MLP_DEPTH):
            if trace is not None:
                trace.append(hidden.data)
            hidden = hidden.relu()
            if k < last:
                hidden = _linear(hidden, params[f"{prefix}.psi.{k}.W"], params[f"{prefix}.psi.{k}.b"])
        degree = np.asarray(scatter.sum(axis=1), dtype=np.float64)
        messages = ad.sparse_matmul(scatter, hidden) @ params[f"{prefix}.psi.{last}.W"].T
        messages = messages + Tensor(degree) * params[f"{prefix}.psi.{last}.b"]
    else:
        messages = Tensor(np.zeros((n, params[f"{prefix}.psi.{last}.b"].shape[0])))
    return _mlp(ad.concat([features, messages], axis=1), params, f"{prefix}.phi", trace)


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise DivergenceError(f"non-finite values after {where}", where=where)


def _forward(points, tp: dict[str, Tensor], edges: GraphEdges, config: ModelConfig, trace: list | None = None) -> Tensor:
    x = _linear(Tensor(points), tp["enc.W"], tp["enc.b"])
    _check_finite(x, "encoder")
    for layer in range(config.layers):
        x = mp_layer(x, edges, tp, f"layer{layer}", trace)
        _check_finite(x, f"layer {layer}")
    out = _linear(x, tp["dec.W"], tp["dec.b"])
    if config.squash == LOGISTIC:
        # the clip only removes round-off at saturation
        out = (SQUASH_EPS + (1.0 - 2.0 * SQUASH_EPS) * out.sigmoid()).clip(SQUASH_EPS, 1.0 - SQUASH_EPS)
    _check_finite(out, "decoder")
    return out


def model_forward(points, params: dict[str, np.ndarray], edges: GraphEdges, config: ModelConfig) -> np.ndarray:
    """Encode, apply ``config.layers`` message-passing layers, decode."""
    x = as_point_set(points, config.dim)
    tp = {k: Tensor(v) for k, v in params.items()}
    return _forward(x, tp, edges, config).data


def relu_preactivations(points, params, edges: GraphEdges, config: ModelConfig) -> np.ndarray:
    """All ReLU inputs of a forward pass, flattened; used to locate kinks."""
    trace: list = []
    _forward(as_point_set(points, config.dim), {k: Tensor(v) for k, v in params.items()}, edges, config, trace)
    return np.concatenate([t.ravel() for t in trace])


# --- loss -----------------------------------------------------------------


def stein_gram(x: Tensor, sx: Tensor, y: Tensor, sy: Tensor, h: float) -> Tensor:
    """Differentiable ``[k0(x_i, y_j)]`` from points and their scores."""
    h2 = h * h
    (n, d), m = x.shape, y.shape[0]
    # Explicit differences: expanding |x - y|^2 cancels badly for tight clusters.
    diff = x.reshape(n, 1, d) - y.reshape(1, m, d)
    sdiff = sx.reshape(n, 1, d) - sy.reshape(1, m, d)
    d2 = (diff * diff).sum(axis=2)
    k = (d2 * (-0.5 / h2)).exp()
    cross = (diff * sdiff).sum(axis=2)
    return k * (d / h2 - d2 / (h2 * h2) + cross / h2 + sx @ sy.T)


def squared_ksd(x: Tensor, density: ScoredDensity, h: float) -> Tensor:
    s = ad.score(x, density)
    n = x.shape[0]
    return stein_gram(x, s, x, s, h).sum() / (n * n)


def loss_step(points, params, edges, config, density, bandwidth_policy=KernelConfig(), fallback_bandwidth=None):
    """Forward and backward pass; returns ``(loss, grads, outputs, h)``.

    The bandwidth is resolved from the transformed points and then held
    constant, so it contributes nothing to the gradients.
    """
    x = as_point_set(points, config.dim)
    tp = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    out = _forward(x, tp, edges, config)
    h = bandwidth_policy.resolve(out.data, fallback_bandwidth)
    loss = squared_ksd(out, density, h)
    if not np.isfinite(loss.data):
        raise DivergenceError("non-finite KSD loss", where="loss")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tp.items()}
    return float(loss.data), grads, out.data, h


def ksd_loss_and_gradients(points, params, edges, config, density, bandwidth_policy=KernelConfig(), fallback_bandwidth=None):
    """Squared KSD of the transformed set and its gradient for every parameter."""
    loss, grads, _, _ = loss_step(points, params, edges, config, density, bandwidth_policy, fallback_bandwidth)
    return loss, grads


# --- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0):
    """Adam with bias correction and decoupled weight decay.

    Returns new ``(params, state)``; the inputs are not modified.
    """
    if not lr > 0 or weight_decay < 0:
        raise ConfigError("need lr > 0 and weight_decay >= 0")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, theta in params.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {k}", step=t, where=k)
        m = (1.0 - b1) * g
        m += b1 * state.m[k]
        v = g * g
        v *= 1.0 - b2
        v += b2 * state.v[k]
        denom = np.sqrt(v / c2)
        denom += state.eps
        step = m / denom
        step *= lr / c1
        theta = theta * (1.0 - lr * weight_decay)
        theta -= step
        new_p[k], new_m[k], new_v[k] = theta, m, v
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)
