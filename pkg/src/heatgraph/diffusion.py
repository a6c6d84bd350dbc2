"""Sparse graph-Laplacian assembly and heat-diffusion time steppers.

The Laplacian convention here is ``L = A - D`` (adjacency minus degree), which
has non-positive spectrum, so ``T + dt * L @ T`` smooths and the implicit
systems ``Id - a * L`` are symmetric positive definite for every ``a > 0``.

Three schemes advance a heat state by one step of length ``dt``:

* explicit:        ``T' = T + dt * L T - dt * Q``
* backward:        ``T' = (Id - dt L)^-1 T - dt * Q``
* crank_nicolson:  ``T' = (Id - dt/2 L)^-1 (Id + dt/2 L) T - dt * Q``

Implicit solves use plain conjugate gradients; a dense eigendecomposition
stepper is provided as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .validation import ConvergenceError, ValidationError, as_float_array

SCHEMES = ("explicit", "backward", "crank_nicolson")


@dataclass(frozen=True)
class HeatState:
    """Per-vertex temperatures at one time, with the observability mask."""

    values: np.ndarray
    time_s: float
    observed_mask: np.ndarray

    def with_values(self, values: np.ndarray, time_s: float | None = None) -> "HeatState":
        return HeatState(values, self.time_s if time_s is None else time_s,
                         self.observed_mask)


@dataclass(frozen=True)
class StepConfig:
    delta_t: float
    substeps: int = 4
    scheme: str = "crank_nicolson"
    cg_tol: float = 1e-10
    cg_max_iter: int | None = None
    jacobi_precondition: bool = False

    def __post_init__(self):
        if self.delta_t < 0:
            raise ValidationError("delta_t must be >= 0")
        if self.substeps < 1:
            raise ValidationError("substeps must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}, want one of {SCHEMES}")

    @property
    def micro_dt(self) -> float:
        return self.delta_t / self.substeps


class SparseLaplacian:
    """Symmetric ``A - D`` Laplacian in CSR form.

    Within each row the off-diagonal entries are stored in column order and
    the diagonal entry last, with the diagonal computed as the negative of
    the running off-diagonal sum in that same order.  A CSR matvec then
    cancels each row against the all-ones vector exactly, so row sums are
    zero in floating point, not just analytically.
    """

    def __init__(self, n: int, edge_index: np.ndarray, weights: np.ndarray):
        edge_index = np.asarray(edge_index, dtype=np.int64)
        weights = as_float_array(weights, "edge_weights", ndim=1)
        if edge_index.ndim != 2 or edge_index.shape[1] != 2:
            raise ValidationError("edge_index must have shape (E, 2)")
        if edge_index.shape[0] != weights.shape[0]:
            raise ValidationError("one weight per edge required")
        if np.any(weights < 0):
            raise ValidationError("negative edge weight (Laplacian must stay SPD-compatible)")
        if edge_index.size and (edge_index.min() < 0 or edge_index.max() >= n):
            raise ValidationError("edge endpoint out of range")

        e = edge_index.shape[0]
        rows = np.concatenate([edge_index[:, 0], edge_index[:, 1]])
        cols = np.concatenate([edge_index[:, 1], edge_index[:, 0]])
        vals = np.concatenate([weights, weights])
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]

        degree = np.zeros(n)
        np.add.at(degree, rows, vals)  # sequential: matches per-row storage order

        off_counts = np.bincount(rows, minlength=n)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(off_counts + 1, out=indptr[1:])
        data = np.empty(2 * e + n)
        indices = np.empty(2 * e + n, dtype=np.int32)
        # off-diagonals in column order, then the diagonal, per row
        fill = np.repeat(indptr[:-1], off_counts) + np.arange(2 * e) - np.repeat(
            np.cumsum(np.concatenate([[0], off_counts[:-1]])), off_counts)
        data[fill] = vals
        indices[fill] = cols
        diag_pos = indptr[1:] - 1
        data[diag_pos] = -degree
        indices[diag_pos] = np.arange(n)

        self.n = n
        self.edge_index = edge_index
        self.weights = weights
        self.degree = degree
        self.matrix = sp.csr_matrix((data, indices, indptr), shape=(n, n))

    def __matmul__(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @property
    def max_diagonal_magnitude(self) -> float:
        return float(self.degree.max()) if self.n else 0.0

    def gershgorin_step_bound(self) -> float:
        """Largest dt satisfying the discrete maximum principle, 1/max|L_ii|."""
        m = self.max_diagonal_magnitude
        return np.inf if m == 0 else 1.0 / m


def assemble_laplacian(graph, edge_weights) -> SparseLaplacian:
    """Build the state-dependent Laplacian for a graph's edge set.

    ``graph`` needs ``n_vertices`` and an ``edge_index`` array; one
    non-negative weight per edge."""
    return SparseLaplacian(graph.n_vertices, graph.edge_index, edge_weights)


def conjugate_gradient(apply_a, b: np.ndarray, tol: float, max_iter: int,
                       precond_diag: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Solve ``A x = b`` for SPD ``A`` given as a matvec callable.

    Stops when the residual 2-norm drops below ``tol * ||b||``; raises
    :class:`ConvergenceError` (reporting the final relative residual)
    otherwise.  Returns ``(x, iterations)``."""
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return np.zeros_like(b), 0
    x = np.zeros_like(b)
    r = b.copy()
    z = r / precond_diag if precond_diag is not None else r
    p = z.copy()
    rz = float(r @ z)
    for k in range(1, max_iter + 1):
        ap = apply_a(p)
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= tol * norm_b:
            return x, k
        z = r / precond_diag if precond_diag is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"CG did not converge in {max_iter} iterations "
        f"(relative residual {np.linalg.norm(r) / norm_b:.3e})"
    )


def _solve_shifted(lap: SparseLaplacian, a: float, b: np.ndarray,
                   cfg: StepConfig) -> np.ndarray:
    """CG solve of ``(Id - a L) x = b`` (SPD since L has non-positive spectrum)."""
    max_iter = cfg.cg_max_iter if cfg.cg_max_iter is not None else 10 * lap.n
    precond = 1.0 + a * lap.degree if cfg.jacobi_precondition else None
    x, _ = conjugate_gradient(lambda v: v - a * (lap @ v), b, cfg.cg_tol,
                              max_iter, precond)
    return x


def _finish(state: HeatState, values: np.ndarray, dt: float, Q, source) -> HeatState:
    if Q is not None:
        values = values - dt * Q
    if source is not None:
        values = values + source
    return state.with_values(values, state.time_s + dt)


def explicit_step(state: HeatState, lap: SparseLaplacian, Q, cfg: StepConfig,
                  source=None) -> HeatState:
    dt = cfg.delta_t
    values = state.values + dt * (lap @ state.values)
    return _finish(state, values, dt, Q, source)


def backward_step(state: HeatState, lap: SparseLaplacian, Q, cfg: StepConfig,
                  source=None) -> HeatState:
    dt = cfg.delta_t
    x = _solve_shifted(lap, dt, state.values, cfg)
    return _finish(state, x, dt, Q, source)


def crank_nicolson_step(state: HeatState, lap: SparseLaplacian, Q,
                        cfg: StepConfig, source=None) -> HeatState:
    a = 0.5 * cfg.delta_t
    b = state.values + a * (lap @ state.values)
    x = _solve_shifted(lap, a, b, cfg)
    return _finish(state, x, cfg.delta_t, Q, source)


_STEPPERS = {
    "explicit": explicit_step,
    "backward": backward_step,
    "crank_nicolson": crank_nicolson_step,
}


def step(state: HeatState, lap: SparseLaplacian, Q, cfg: StepConfig,
         source=None) -> HeatState:
    """Advance one step with the scheme selected in ``cfg``."""
    return _STEPPERS[cfg.scheme](state, lap, Q, cfg, source)


def scheme_amplification(scheme: str, dt: float, lam: np.ndarray) -> np.ndarray:
    """Per-eigenmode amplification factor of a scheme at step size ``dt``."""
    lam = np.asarray(lam, dtype=np.float64)
    if scheme == "explicit":
        return 1.0 + dt * lam
    if scheme == "backward":
        return 1.0 / (1.0 - dt * lam)
    if scheme == "crank_nicolson":
        return (1.0 + 0.5 * dt * lam) / (1.0 - 0.5 * dt * lam)
    raise ValidationError(f"unknown scheme {scheme!r}")


def dense_oracle_step(values: np.ndarray, dense_l: np.ndarray, scheme: str,
                      dt: float) -> np.ndarray:
    """Reference stepper via full symmetric eigendecomposition (small N only)."""
    lam, u = np.linalg.eigh(dense_l)
    coeff = u.T @ values
    return u @ (scheme_amplification(scheme, dt, lam) * coeff)


def explicit_stability_limit(lap: SparseLaplacian) -> float:
    """Exact explicit-scheme step bound ``2 / |lambda_min|`` (dense eig; small N)."""
    lam = np.linalg.eigvalsh(lap.to_dense())
    lam_min = float(lam.min())
    return np.inf if lam_min >= 0 else 2.0 / abs(lam_min)
