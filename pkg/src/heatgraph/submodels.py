"""Learnable connectivity and dissipation sub-models.

Both are single-hidden-layer perceptrons (tanh hidden) evaluated in batch
over edges or vertices, with hand-written reverse-mode gradients.  The
connectivity net ends in softplus so every edge weight is strictly positive,
which keeps the assembled Laplacian valid for implicit solves; the
dissipation net has an identity output.

Edge features (13): distance, the two endpoint temperatures, two 4-way
one-hot class encodings, and the two endpoint densities.  Vertex features
(6): temperature, one-hot class, density.  Temperatures, distances, and
densities are divided by reference scales frozen at training start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .validation import ValidationError

EDGE_FEATURE_DIM = 13
VERTEX_FEATURE_DIM = 6
DEFAULT_HIDDEN_WIDTH = 256

OUTPUT_TRANSFORMS = ("softplus", "identity")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_prime(x):
    return expit(x)


@dataclass
class MlpParams:
    """Weights of one single-hidden-layer scalar-output network."""

    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,) row of the 1 x hidden output matrix
    b2: float
    output_transform: str

    def __post_init__(self):
        if self.output_transform not in OUTPUT_TRANSFORMS:
            raise ValidationError(f"unknown output transform {self.output_transform!r}")
        if self.W1.shape[0] != self.b1.shape[0] or self.W1.shape[0] != self.w2.shape[0]:
            raise ValidationError("inconsistent MLP parameter shapes")
        for arr in (self.W1, self.b1, self.w2):
            if not np.all(np.isfinite(arr)):
                raise ValidationError("non-finite MLP parameter")
        if not math.isfinite(self.b2):
            raise ValidationError("non-finite MLP parameter")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W1.shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams(self.W1.copy(), self.b1.copy(), self.w2.copy(),
                         float(self.b2), self.output_transform)


def init_mlp(input_dim: int, hidden_width: int, output_transform: str,
             rng: np.random.Generator) -> MlpParams:
    """Seeded uniform init, bound sqrt(6 / (fan_in + fan_out)) per layer."""
    lim1 = math.sqrt(6.0 / (input_dim + hidden_width))
    lim2 = math.sqrt(6.0 / (hidden_width + 1))
    return MlpParams(
        W1=rng.uniform(-lim1, lim1, size=(hidden_width, input_dim)),
        b1=np.zeros(hidden_width),
        w2=rng.uniform(-lim2, lim2, size=hidden_width),
        b2=0.0,
        output_transform=output_transform,
    )


def zero_mlp(input_dim: int, hidden_width: int, output_transform: str) -> MlpParams:
    return MlpParams(np.zeros((hidden_width, input_dim)), np.zeros(hidden_width),
                     np.zeros(hidden_width), 0.0, output_transform)


@dataclass
class MlpCache:
    X: np.ndarray      # (n, input)
    h: np.ndarray      # (n, hidden)
    y_lin: np.ndarray  # (n,) pre-transform output


def mlp_forward(params: MlpParams, X: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Batched forward pass; X is (n, input_dim), result is (n,)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.input_dim:
        raise ValidationError(
            f"feature dim {X.shape[1]} != network input dim {params.input_dim}"
        )
    h = np.tanh(X @ params.W1.T + params.b1)
    y_lin = h @ params.w2 + params.b2
    y = softplus(y_lin) if params.output_transform == "softplus" else y_lin
    return y, MlpCache(X=X, h=h, y_lin=y_lin)


def _dy_lin(params: MlpParams, cache: MlpCache, dy: np.ndarray) -> np.ndarray:
    if params.output_transform == "softplus":
        return dy * softplus_prime(cache.y_lin)
    return np.asarray(dy, dtype=np.float64)


def mlp_backward(params: MlpParams, cache: MlpCache,
                 dy: np.ndarray) -> tuple[dict, np.ndarray]:
    """Exact reverse-mode gradients of ``sum(dy * y)``.

    Returns ``({W1, b1, w2, b2}, dX)`` with shapes mirroring the parameters
    and the cached input batch."""
    dy_lin = _dy_lin(params, cache, dy)
    dz = (dy_lin[:, None] * params.w2) * (1.0 - cache.h**2)
    grads = {
        "W1": dz.T @ cache.X,
        "b1": dz.sum(axis=0),
        "w2": cache.h.T @ dy_lin,
        "b2": np.asarray(dy_lin.sum()),
    }
    return grads, dz @ params.W1


def mlp_forward_with_input_grad(params: MlpParams, X: np.ndarray,
                                k: int) -> tuple[np.ndarray, np.ndarray, MlpCache]:
    """Forward pass plus the derivative of the output w.r.t. feature ``k``."""
    y, cache = mlp_forward(params, X)
    u = 1.0 - cache.h**2
    g_lin = u @ (params.w2 * params.W1[:, k])
    if params.output_transform == "softplus":
        g = softplus_prime(cache.y_lin) * g_lin
    else:
        g = g_lin
    return y, g, cache


def mlp_backward_with_input_grad(params: MlpParams, cache: MlpCache, k: int,
                                 dy: np.ndarray, dg: np.ndarray) -> tuple[dict, np.ndarray]:
    """Gradients of ``sum(dy * y) + sum(dg * g)`` w.r.t. parameters and inputs.

    ``g`` is the per-sample input derivative returned by
    :func:`mlp_forward_with_input_grad`; the extra terms need products of
    first derivatives, which stay closed-form for one hidden layer."""
    h, X = cache.h, cache.X
    u = 1.0 - h**2
    wk = params.w2 * params.W1[:, k]           # (hidden,)
    g_lin = u @ wk                             # (n,)
    if params.output_transform == "softplus":
        s = softplus_prime(cache.y_lin)
        dy_lin = dy * s + dg * g_lin * (s * (1.0 - s))
        dg_lin = dg * s
    else:
        dy_lin = np.asarray(dy, dtype=np.float64)
        dg_lin = np.asarray(dg, dtype=np.float64)

    # plain output path
    dz = (dy_lin[:, None] * params.w2) * u
    grads = {
        "W1": dz.T @ X,
        "b1": dz.sum(axis=0),
        "w2": h.T @ dy_lin,
        "b2": np.asarray(dy_lin.sum()),
    }
    # g_lin = sum_m w2_m * W1[m, k] * u_m path
    ug = u.T @ dg_lin                          # (hidden,)
    dz_g = (dg_lin[:, None] * wk) * (-2.0 * h) * u
    grads["W1"] += dz_g.T @ X
    grads["W1"][:, k] += ug * params.w2
    grads["b1"] += dz_g.sum(axis=0)
    grads["w2"] += ug * params.W1[:, k]
    return grads, (dz + dz_g) @ params.W1


@dataclass(frozen=True)
class FeatureScales:
    """Reference magnitudes dividing raw inputs; frozen into checkpoints."""

    t_ref: float = 1000.0
    rho_ref: float = 1.0
    sid_ref: float = 1.0


def one_hot_classes(codes: np.ndarray) -> np.ndarray:
    out = np.zeros((codes.shape[0], 4))
    out[np.arange(codes.shape[0]), codes] = 1.0
    return out


def edge_features(graph, t_values: np.ndarray, scales: FeatureScales) -> np.ndarray:
    """(E, 13) feature rows, one per undirected edge with endpoints id-ordered."""
    i = graph.edge_index[:, 0]
    j = graph.edge_index[:, 1]
    onehot = one_hot_classes(graph.classes)
    feats = np.empty((graph.n_edges, EDGE_FEATURE_DIM))
    feats[:, 0] = graph.edge_length / scales.rho_ref
    feats[:, 1] = t_values[i] / scales.t_ref
    feats[:, 2] = t_values[j] / scales.t_ref
    feats[:, 3:7] = onehot[i]
    feats[:, 7:11] = onehot[j]
    feats[:, 11] = graph.sid[i] / scales.sid_ref
    feats[:, 12] = graph.sid[j] / scales.sid_ref
    return feats


def vertex_features(graph, t_values: np.ndarray, scales: FeatureScales) -> np.ndarray:
    feats = np.empty((graph.n_vertices, VERTEX_FEATURE_DIM))
    feats[:, 0] = t_values / scales.t_ref
    feats[:, 1:5] = one_hot_classes(graph.classes)
    feats[:, 5] = graph.sid / scales.sid_ref
    return feats


def connectivity(phi: MlpParams, graph, t_values: np.ndarray,
                 scales: FeatureScales) -> tuple[np.ndarray, MlpCache]:
    """Edge weights c_ij > 0 from the connectivity net, plus backward cache."""
    if phi.output_transform != "softplus":
        raise ValidationError("connectivity net must use a softplus output")
    return mlp_forward(phi, edge_features(graph, t_values, scales))


def connectivity_backward(phi: MlpParams, graph, cache: MlpCache,
                          dc: np.ndarray, scales: FeatureScales) -> tuple[dict, np.ndarray]:
    """Route edge-weight gradients into net parameters and temperatures."""
    grads, dX = mlp_backward(phi, cache, dc)
    dt = np.zeros(graph.n_vertices)
    np.add.at(dt, graph.edge_index[:, 0], dX[:, 1] / scales.t_ref)
    np.add.at(dt, graph.edge_index[:, 1], dX[:, 2] / scales.t_ref)
    return grads, dt


def dissipation(psi: MlpParams, graph, t_values: np.ndarray,
                scales: FeatureScales) -> tuple[np.ndarray, MlpCache]:
    """Per-vertex dissipation Q from the local vertex features."""
    if psi.output_transform != "identity":
        raise ValidationError("dissipation net must use an identity output")
    return mlp_forward(psi, vertex_features(graph, t_values, scales))


def dissipation_backward(psi: MlpParams, cache: MlpCache,
                         dq: np.ndarray, scales: FeatureScales) -> tuple[dict, np.ndarray]:
    grads, dX = mlp_backward(psi, cache, dq)
    return grads, dX[:, 0] / scales.t_ref
