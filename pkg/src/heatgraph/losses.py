"""Prediction loss, the six physics regularizers, and their gradients.

All losses are sums of squares (or hinge-squared) over one transition
``T -> T'`` of the diffusion model:

* data:   top-surface prediction error against the observed frame
* phi:    connectivity consistency with the inverse-square-distance law
* psi:    dissipation must vanish at interior vertices
* heat:   global balance - the total temperature may change only by the
          applied dissipation
* min/max: discrete maximum principle against the previous-step neighborhood
* energy: the centered second moment of the state must not grow

Raw terms are normalized by snapshot values taken at the start of each
curriculum stage so the configured weights act on comparable magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .submodels import (FeatureScales, MlpParams, connectivity, dissipation,
                        mlp_forward_with_input_grad)
from .validation import ValidationError

REG_TERMS = ("phi", "psi", "heat", "min", "max", "energy")
ALL_TERMS = ("data",) + REG_TERMS

REG_SUBSETS = {
    "all": frozenset(REG_TERMS),
    "math": frozenset({"phi", "psi", "heat"}),
    "phys": frozenset({"min", "max", "energy"}),
    "none": frozenset(),
}
WEIGHT_LEVELS = {"high": 10.0, "normal": 1.0, "low": 0.1, "none": 0.0}

NORMALIZER_FLOOR = 1e-12
#: Regularizer normalizers are floored at this fraction of the data-term
#: snapshot.  A term that starts near zero (the hinge losses under a
#: conservative initial scheme) is then measured on the data scale; the raw
#: 1e-12 floor alone would hand it a ~1e12 gradient factor that drowns
#: every other term the moment it activates.
NORMALIZER_REL_FLOOR = 1.0


@dataclass(frozen=True)
class LossWeights:
    w_data: float = 1.0
    w_phi: float = 1.0
    w_psi: float = 1.0
    w_heat: float = 1.0
    w_min: float = 1.0
    w_max: float = 1.0
    w_energy: float = 1.0

    def __post_init__(self):
        for term in ALL_TERMS:
            if getattr(self, f"w_{term}") < 0:
                raise ValidationError(f"w_{term} must be >= 0")

    @classmethod
    def from_preset(cls, subset: str = "all", level: str = "normal") -> "LossWeights":
        """Weight the selected regularizer subset at 10x / 1x / 0.1x / 0x."""
        if subset not in REG_SUBSETS:
            raise ValidationError(f"unknown regularization subset {subset!r}")
        if level not in WEIGHT_LEVELS:
            raise ValidationError(f"unknown weight level {level!r}")
        factor = WEIGHT_LEVELS[level]
        kwargs = {
            f"w_{t}": factor if t in REG_SUBSETS[subset] else 0.0 for t in REG_TERMS
        }
        return cls(w_data=1.0, **kwargs)

    def as_dict(self) -> dict[str, float]:
        return {t: getattr(self, f"w_{t}") for t in ALL_TERMS}


@dataclass
class LossReport:
    """Per-term raw and normalized values plus the weighted total."""

    raw: dict[str, float] = field(default_factory=dict)
    normalized: dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def as_line(self) -> dict:
        out = {f"raw_{k}": v for k, v in self.raw.items()}
        out.update({f"norm_{k}": v for k, v in self.normalized.items()})
        out["total"] = self.total
        return out


def floor_normalizers(raw: dict[str, float]) -> dict[str, float]:
    data_floor = NORMALIZER_REL_FLOOR * max(float(raw["data"]), NORMALIZER_FLOOR)
    out = {k: max(float(v), data_floor, NORMALIZER_FLOOR) for k, v in raw.items()}
    out["data"] = max(float(raw["data"]), NORMALIZER_FLOOR)
    return out


def total_loss(raw: dict[str, float], weights: LossWeights,
               normalizers: dict[str, float]) -> LossReport:
    """Weighted sum of snapshot-normalized terms."""
    w = weights.as_dict()
    normalized = {t: raw[t] / normalizers[t] for t in ALL_TERMS}
    total = sum(w[t] * normalized[t] for t in ALL_TERMS)
    return LossReport(raw=dict(raw), normalized=normalized, total=total)


def loss_data(pred_values: np.ndarray, obs_values: np.ndarray,
              top_idx: np.ndarray) -> float:
    """Sum of squared errors over the observable (top-surface) vertices."""
    if len(top_idx) == 0:
        raise ValidationError("no observable vertices")
    diff = pred_values[top_idx] - obs_values
    return float(diff @ diff)


def loss_phi_values(c: np.ndarray, rho: np.ndarray) -> float:
    """Direct connectivity regularizer: sum of (c - rho^-2)^2 over edges."""
    diff = c - rho**-2
    return float(diff @ diff)


def loss_phi(phi: MlpParams, graph, t_values: np.ndarray,
             scales: FeatureScales) -> float:
    if graph.n_edges == 0:
        raise ValidationError("graph has no edges")
    c, _ = connectivity(phi, graph, t_values, scales)
    return loss_phi_values(c, graph.edge_length)


def loss_phi_logderiv(phi: MlpParams, graph, t_values: np.ndarray,
                      scales: FeatureScales) -> float:
    """Scale-free variant: sum of (phi'(rho)/phi(rho) + 2/rho)^2.

    ``phi'`` is the derivative w.r.t. the raw distance in mm (the chain rule
    through the feature scaling is included).  Selected by the trainer's
    ``phi_reg="logderiv"`` flag; the direct form is the default."""
    from .submodels import edge_features
    feats = edge_features(graph, t_values, scales)
    y, g, _ = mlp_forward_with_input_grad(phi, feats, 0)
    dphi_drho = g / scales.rho_ref
    resid = dphi_drho / y + 2.0 / graph.edge_length
    return float(resid @ resid)


def loss_psi_values(q: np.ndarray, interior_mask: np.ndarray) -> float:
    """Dissipation penalty: sum of Q_i^2 over interior vertices."""
    qi = q[interior_mask]
    return float(qi @ qi)


def loss_psi(psi: MlpParams, graph, t_values: np.ndarray,
             scales: FeatureScales) -> float:
    q, _ = dissipation(psi, graph, t_values, scales)
    return loss_psi_values(q, graph.interior_mask())


def loss_heat(t_n: np.ndarray, t_np1: np.ndarray,
              applied_dissipation: np.ndarray) -> float:
    """Squared global imbalance (sum of T' - T + D)^2.

    ``applied_dissipation`` is the per-step amount the stepper actually
    removed (dt * Q minus any injected source), so a balance-consistent
    step scores exactly zero."""
    s = float(np.sum(t_np1 - t_n + applied_dissipation))
    return s * s


def neighborhood_envelope(t_values: np.ndarray,
                          edge_index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex (min, max) over the vertex itself and its neighbors."""
    nmin = t_values.copy()
    nmax = t_values.copy()
    if len(edge_index):
        i, j = edge_index[:, 0], edge_index[:, 1]
        np.minimum.at(nmin, i, t_values[j])
        np.minimum.at(nmin, j, t_values[i])
        np.maximum.at(nmax, i, t_values[j])
        np.maximum.at(nmax, j, t_values[i])
    return nmin, nmax


def loss_minmax(t_n: np.ndarray, t_np1: np.ndarray,
                edge_index: np.ndarray) -> tuple[float, float]:
    """Hinge-squared violations of the previous-step neighborhood envelope."""
    nmin, nmax = neighborhood_envelope(t_n, edge_index)
    under = np.maximum(0.0, nmin - t_np1)
    over = np.maximum(0.0, t_np1 - nmax)
    return float(under @ under), float(over @ over)


def discrete_energy(t_values: np.ndarray) -> float:
    """Centered second moment (1/N) sum (T_i - mean)^2."""
    if len(t_values) == 0:
        raise ValidationError("empty state")
    d = t_values - t_values.mean()
    return float(d @ d) / len(t_values)


def loss_energy(t_n: np.ndarray, t_np1: np.ndarray) -> float:
    """Hinge on growth of the discrete potential energy."""
    return max(0.0, discrete_energy(t_np1) - discrete_energy(t_n))


def composite_energy_metric(raw: dict[str, float]) -> float:
    """The combined physics-violation score: energy + heat + min + max."""
    return raw["energy"] + raw["heat"] + raw["min"] + raw["max"]


# ---------------------------------------------------------------------------
# gradients used by the trainer's reverse pass


def loss_data_backward(pred_values: np.ndarray, obs_values: np.ndarray,
                       top_idx: np.ndarray, factor: float) -> np.ndarray:
    grad = np.zeros_like(pred_values)
    grad[top_idx] = 2.0 * factor * (pred_values[top_idx] - obs_values)
    return grad


def loss_phi_values_backward(c: np.ndarray, rho: np.ndarray,
                             factor: float) -> np.ndarray:
    return 2.0 * factor * (c - rho**-2)


def loss_psi_values_backward(q: np.ndarray, interior_mask: np.ndarray,
                             factor: float) -> np.ndarray:
    grad = np.zeros_like(q)
    grad[interior_mask] = 2.0 * factor * q[interior_mask]
    return grad


def loss_heat_backward(t_n: np.ndarray, t_np1: np.ndarray,
                       applied_dissipation: np.ndarray,
                       factor: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dT, dT', dD)."""
    s = 2.0 * factor * float(np.sum(t_np1 - t_n + applied_dissipation))
    n = len(t_n)
    return np.full(n, -s), np.full(n, s), np.full(n, s)


def _route_envelope_grad(t_values: np.ndarray, edge_index: np.ndarray,
                         vertices: np.ndarray, bound: np.ndarray,
                         amounts: np.ndarray, grad: np.ndarray) -> None:
    """Scatter each vertex's envelope gradient onto the element attaining it.

    The attaining element is the vertex itself when it matches the bound,
    otherwise the lowest-id matching neighbor; this is the deterministic
    subgradient choice for the min/max over the neighborhood set."""
    if len(vertices) == 0:
        return
    neighbors: dict[int, list[int]] = {int(v): [] for v in vertices}
    want = set(neighbors)
    for i, j in edge_index:
        if int(i) in want:
            neighbors[int(i)].append(int(j))
        if int(j) in want:
            neighbors[int(j)].append(int(i))
    for v, amount in zip(vertices, amounts):
        v = int(v)
        if t_values[v] == bound[v]:
            grad[v] += amount
            continue
        for w in sorted(neighbors[v]):
            if t_values[w] == bound[v]:
                grad[w] += amount
                break


def loss_minmax_backward(t_n: np.ndarray, t_np1: np.ndarray,
                         edge_index: np.ndarray, factor_min: float,
                         factor_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dT, dT') for the weighted pair of envelope losses."""
    nmin, nmax = neighborhood_envelope(t_n, edge_index)
    under = np.maximum(0.0, nmin - t_np1)
    over = np.maximum(0.0, t_np1 - nmax)
    d_next = 2.0 * factor_max * over - 2.0 * factor_min * under
    d_prev = np.zeros_like(t_n)
    over_idx = np.nonzero(over > 0)[0]
    under_idx = np.nonzero(under > 0)[0]
    _route_envelope_grad(t_n, edge_index, over_idx, nmax,
                         -2.0 * factor_max * over[over_idx], d_prev)
    _route_envelope_grad(t_n, edge_index, under_idx, nmin,
                         2.0 * factor_min * under[under_idx], d_prev)
    return d_prev, d_next


def loss_energy_backward(t_n: np.ndarray, t_np1: np.ndarray,
                         factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dT, dT'); zero on the inactive side of the hinge."""
    if discrete_energy(t_np1) <= discrete_energy(t_n):
        return np.zeros_like(t_n), np.zeros_like(t_np1)
    n = len(t_n)
    d_next = 2.0 * factor / n * (t_np1 - t_np1.mean())
    d_prev = -2.0 * factor / n * (t_n - t_n.mean())
    return d_prev, d_next
