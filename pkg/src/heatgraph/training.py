"""Curriculum training of the diffusion sub-models.

Training walks the build layer by layer.  Each stage rolls the selected
scheme out over one layer's frame window (several micro-steps per frame
interval, re-evaluating connectivity and dissipation each micro-step),
scores the prediction and regularizer losses, and backpropagates by hand:
explicit steps by transposition, implicit steps by solving the same SPD
system for the adjoint and routing it into the edge-weight gradients.
After a stage converges (or hits its iteration cap), the model simulates
across the recoat gap and the predicted internal state becomes the hidden
initial state of the next stage.

The laser source is injected at the position detected in the data frames;
its intensity and decay rate are trained jointly with the two networks,
the decay rate through a softplus reparameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import losses as L
from .checkpoint import Checkpoint
from .diffusion import (HeatState, SparseLaplacian, StepConfig,
                        conjugate_gradient, step)
from .frames import SequenceManifest, ThermalFrame, ThermalSequence, detect_laser
from .graphs import LayeredGraph
from .submodels import (EDGE_FEATURE_DIM, VERTEX_FEATURE_DIM, FeatureScales,
                        MlpParams, connectivity, connectivity_backward,
                        dissipation, dissipation_backward, init_mlp,
                        mlp_backward_with_input_grad,
                        mlp_forward_with_input_grad, softplus, softplus_prime)
from .validation import ValidationError

PHI_REG_FORMS = ("direct", "logderiv")

# softplus(0.5413...) = 1.0: neutral starting decay rate for the laser
_ETA_RAW_FOR_UNIT_ETA = math.log(math.e - 1.0)


@dataclass
class AdamState:
    """ADAM optimizer state; moments are keyed like the parameter dict."""

    lr: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.99
    eps_adam: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected ADAM step; returns the updated parameter dict."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    out = {}
    for key, value in params.items():
        g = grads[key]
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(value)
            state.m[key] = m
            state.v[key] = np.zeros_like(value)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        out[key] = value - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_adam)
    return out


@dataclass
class ParamPack:
    """Everything the optimizer touches: both nets plus the laser scalars."""

    phi: MlpParams
    psi: MlpParams
    laser_intensity: float = 0.0
    laser_eta_raw: float = _ETA_RAW_FOR_UNIT_ETA

    @property
    def laser_eta(self) -> float:
        return float(softplus(self.laser_eta_raw))

    def to_dict(self) -> dict:
        out = {}
        for name, mlp in (("phi", self.phi), ("psi", self.psi)):
            out[f"{name}.W1"] = mlp.W1
            out[f"{name}.b1"] = mlp.b1
            out[f"{name}.w2"] = mlp.w2
            out[f"{name}.b2"] = np.asarray(mlp.b2)
        out["laser.I"] = np.asarray(self.laser_intensity)
        out["laser.eta_raw"] = np.asarray(self.laser_eta_raw)
        return out

    @classmethod
    def from_dict(cls, d: dict, phi_transform="softplus", psi_transform="identity"):
        def mlp(name, transform):
            return MlpParams(W1=np.array(d[f"{name}.W1"]), b1=np.array(d[f"{name}.b1"]),
                             w2=np.array(d[f"{name}.w2"]), b2=float(d[f"{name}.b2"]),
                             output_transform=transform)
        return cls(phi=mlp("phi", phi_transform), psi=mlp("psi", psi_transform),
                   laser_intensity=float(d["laser.I"]),
                   laser_eta_raw=float(d["laser.eta_raw"]))

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.to_dict().items()}

    @classmethod
    def initialize(cls, hidden_width: int, seed: int) -> "ParamPack":
        rng = np.random.default_rng(seed)
        return cls(
            phi=init_mlp(EDGE_FEATURE_DIM, hidden_width, "softplus", rng),
            psi=init_mlp(VERTEX_FEATURE_DIM, hidden_width, "identity", rng),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ParamPack":
        return cls(phi=ckpt.phi.copy(), psi=ckpt.psi.copy(),
                   laser_intensity=ckpt.laser_intensity,
                   laser_eta_raw=ckpt.laser_eta_raw)


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "crank_nicolson"
    substeps: int = 4
    hidden_width: int = 256
    reg_subset: str = "all"
    weight_level: str = "normal"
    phi_reg: str = "direct"
    budget: int = 4500
    stage_tol: float = 0.05
    lr: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.99
    eps_adam: float = 1e-8
    cg_tol: float = 1e-10
    cg_max_iter: int | None = None
    seed: int = 0
    laser: bool = True
    t_ref: float = 1000.0
    material: str = ""

    def __post_init__(self):
        if self.phi_reg not in PHI_REG_FORMS:
            raise ValidationError(f"phi_reg must be one of {PHI_REG_FORMS}")

    def weights(self) -> L.LossWeights:
        return L.LossWeights.from_preset(self.reg_subset, self.weight_level)


@dataclass
class Interval:
    """One data interval: its length, end-frame observations, laser center."""

    dt: float
    obs_idx: np.ndarray
    obs_values: np.ndarray
    laser_center: tuple | None
    end_time: float


@dataclass
class StageData:
    layer_index: int
    graph: LayeredGraph
    t0: np.ndarray
    intervals: list


@dataclass
class StepRecord:
    t: np.ndarray
    t_next: np.ndarray
    lap: SparseLaplacian
    c: np.ndarray
    phi_cache: object
    phi_input_grad: np.ndarray | None
    q_psi: np.ndarray
    psi_cache: object
    laser_e: np.ndarray | None   # exp(-eta d) at top vertices
    laser_d: np.ndarray | None
    top_idx: np.ndarray | None
    x: np.ndarray | None         # implicit solve solution
    dt: float
    applied_d: np.ndarray
    interval: Interval | None    # set on the last micro-step of an interval


@dataclass
class RolloutResult:
    states: list          # HeatState at each interval end
    raw: dict             # summed raw loss terms
    records: list         # per micro-step, for the reverse pass


def observed_values(graph: LayeredGraph, frame: ThermalFrame,
                    manifest: SequenceManifest) -> tuple[np.ndarray, np.ndarray]:
    """Frame temperatures under the graph's current top-layer vertices."""
    top_idx = np.nonzero(graph.top_layer_mask())[0]
    cols = np.rint(graph.positions[top_idx, 0] / manifest.pixel_pitch_mm).astype(int)
    rows = np.rint(graph.positions[top_idx, 1] / manifest.pixel_pitch_mm).astype(int)
    if (rows.min() < 0 or cols.min() < 0 or rows.max() >= frame.height
            or cols.max() >= frame.width):
        raise ValidationError("graph vertex outside the frame grid")
    return top_idx, frame.values[rows, cols]


def _laser_source(pack: ParamPack, graph: LayeredGraph, top_idx: np.ndarray,
                  center) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xy = graph.positions[top_idx, :2]
    d = np.hypot(xy[:, 0] - center[0], xy[:, 1] - center[1])
    e = np.exp(-pack.laser_eta * d)
    q = np.zeros(graph.n_vertices)
    q[top_idx] = pack.laser_intensity * e
    return q, e, d


def rollout(graph: LayeredGraph, t0: np.ndarray, intervals: list,
            pack: ParamPack, cfg: TrainConfig,
            scales: FeatureScales, keep_records: bool = True) -> RolloutResult:
    """Run the scheme over a window of data intervals, scoring all losses.

    Each interval of length dt advances by ``cfg.substeps`` equal
    micro-steps, re-evaluating the connectivity and dissipation nets (and
    the laser source) at every micro-step.  The prediction loss fires at
    interval ends; the regularizers accumulate per micro-step.
    """
    values = np.asarray(t0, dtype=np.float64)
    raw = {t: 0.0 for t in L.ALL_TERMS}
    records: list[StepRecord] = []
    states: list[HeatState] = []
    top_mask = graph.top_layer_mask()
    interior = graph.interior_mask()
    time_s = intervals[0].end_time - intervals[0].dt if intervals else 0.0

    for interval in intervals:
        micro_dt = interval.dt / cfg.substeps
        step_cfg = StepConfig(delta_t=micro_dt, substeps=1, scheme=cfg.scheme,
                              cg_tol=cfg.cg_tol, cg_max_iter=cfg.cg_max_iter)
        for k in range(cfg.substeps):
            phi_grad = None
            if cfg.phi_reg == "logderiv":
                from .submodels import edge_features
                feats = edge_features(graph, values, scales)
                c, g, phi_cache = mlp_forward_with_input_grad(pack.phi, feats, 0)
                phi_grad = g
            else:
                c, phi_cache = connectivity(pack.phi, graph, values, scales)
            lap = SparseLaplacian(graph.n_vertices, graph.edge_index, c)
            q_psi, psi_cache = dissipation(pack.psi, graph, values, scales)

            laser_q = laser_e = laser_d = top_idx = None
            source = None
            if cfg.laser and interval.laser_center is not None:
                top_idx = np.nonzero(top_mask)[0]
                laser_q, laser_e, laser_d = _laser_source(
                    pack, graph, top_idx, interval.laser_center)
                source = laser_q

            state = HeatState(values, time_s, top_mask)
            new_state = step(state, lap, q_psi, step_cfg, source)
            t_next = new_state.values
            applied_d = micro_dt * q_psi - (laser_q if laser_q is not None else 0.0)

            if cfg.phi_reg == "logderiv":
                resid = (phi_grad / scales.rho_ref) / c + 2.0 / graph.edge_length
                raw["phi"] += float(resid @ resid)
            else:
                raw["phi"] += L.loss_phi_values(c, graph.edge_length)
            raw["psi"] += L.loss_psi_values(q_psi, interior)
            raw["heat"] += L.loss_heat(values, t_next, applied_d)
            lmin, lmax = L.loss_minmax(values, t_next, graph.edge_index)
            raw["min"] += lmin
            raw["max"] += lmax
            raw["energy"] += L.loss_energy(values, t_next)

            is_last = k == cfg.substeps - 1
            if is_last:
                raw["data"] += L.loss_data(t_next, interval.obs_values,
                                           interval.obs_idx)
            if keep_records:
                records.append(StepRecord(
                    t=values, t_next=t_next, lap=lap, c=c, phi_cache=phi_cache,
                    phi_input_grad=phi_grad, q_psi=q_psi, psi_cache=psi_cache,
                    laser_e=laser_e, laser_d=laser_d, top_idx=top_idx,
                    x=None if cfg.scheme == "explicit" else _recover_solution(
                        t_next, micro_dt, q_psi, laser_q),
                    dt=micro_dt, applied_d=applied_d,
                    interval=interval if is_last else None,
                ))
            values = t_next
            time_s += micro_dt
        states.append(HeatState(values, interval.end_time, top_mask))
    return RolloutResult(states=states, raw=raw, records=records)


def _recover_solution(t_next, dt, q_psi, laser_q):
    """The implicit solve's x, recovered from the finished step."""
    x = t_next + dt * q_psi
    if laser_q is not None:
        x = x - laser_q
    return x


def backward_through_rollout(graph: LayeredGraph, records: list,
                             pack: ParamPack, cfg: TrainConfig,
                             scales: FeatureScales,
                             factors: dict) -> dict:
    """Reverse-mode gradients of the weighted loss for a cached rollout.

    ``factors`` maps each loss term to its weight divided by the
    normalization snapshot.  For implicit steps the adjoint solves the same
    SPD system ``(Id - a L)`` as the forward pass before the solution/state
    outer products are masked onto the edge set.
    """
    grads = pack.zero_grads()
    edges = graph.edge_index
    ei, ej = edges[:, 0], edges[:, 1]
    interior = graph.interior_mask()
    lam = np.zeros(graph.n_vertices)
    eta = pack.laser_eta
    max_iter = cfg.cg_max_iter if cfg.cg_max_iter is not None else 10 * graph.n_vertices

    for rec in reversed(records):
        t, t_next, dt = rec.t, rec.t_next, rec.dt
        g_next = lam
        lam = np.zeros(graph.n_vertices)

        if rec.interval is not None and factors["data"] != 0.0:
            g_next = g_next + L.loss_data_backward(
                t_next, rec.interval.obs_values, rec.interval.obs_idx,
                factors["data"])
        d_applied = None
        if factors["heat"] != 0.0:
            d_prev, d_next, d_applied = L.loss_heat_backward(
                t, t_next, rec.applied_d, factors["heat"])
            g_next = g_next + d_next
            lam += d_prev
        if factors["min"] != 0.0 or factors["max"] != 0.0:
            d_prev, d_next = L.loss_minmax_backward(
                t, t_next, edges, factors["min"], factors["max"])
            g_next = g_next + d_next
            lam += d_prev
        if factors["energy"] != 0.0:
            d_prev, d_next = L.loss_energy_backward(t, t_next, factors["energy"])
            g_next = g_next + d_next
            lam += d_prev

        # transition adjoint
        dq_psi = -dt * g_next
        d_laser_q = g_next.copy()
        if cfg.scheme == "explicit":
            lam += g_next + dt * (rec.lap @ g_next)
            dc = dt * (g_next[ei] - g_next[ej]) * (t[ej] - t[ei])
        elif cfg.scheme == "backward":
            mu, _ = conjugate_gradient(lambda v: v - dt * (rec.lap @ v),
                                       g_next, cfg.cg_tol, max_iter)
            lam += mu
            dc = dt * (mu[ei] - mu[ej]) * (rec.x[ej] - rec.x[ei])
        else:  # crank_nicolson
            a = 0.5 * dt
            mu, _ = conjugate_gradient(lambda v: v - a * (rec.lap @ v),
                                       g_next, cfg.cg_tol, max_iter)
            lam += mu + a * (rec.lap @ mu)
            xt = rec.x + t
            dc = a * (mu[ei] - mu[ej]) * (xt[ej] - xt[ei])

        # applied dissipation enters the balance loss: D = dt q_psi - q_laser
        if d_applied is not None:
            dq_psi = dq_psi + dt * d_applied
            d_laser_q = d_laser_q - d_applied

        # laser parameters
        if rec.laser_e is not None:
            d_top = d_laser_q[rec.top_idx]
            grads["laser.I"] += np.asarray(d_top @ rec.laser_e)
            d_eta = float(d_top @ (pack.laser_intensity * -rec.laser_d * rec.laser_e))
            grads["laser.eta_raw"] += d_eta * softplus_prime(pack.laser_eta_raw)

        # connectivity net: transition plus its regularizer
        if cfg.phi_reg == "logderiv":
            g = rec.phi_input_grad
            dphi_drho = (g / scales.rho_ref) / rec.c
            resid = dphi_drho + 2.0 / graph.edge_length
            dresid = 2.0 * factors["phi"] * resid
            dy = dc + dresid * (-(g / scales.rho_ref) / rec.c**2)
            dg = dresid / (scales.rho_ref * rec.c)
            phi_grads, d_feats = mlp_backward_with_input_grad(
                pack.phi, rec.phi_cache, 0, dy, dg)
            np.add.at(lam, ei, d_feats[:, 1] / scales.t_ref)
            np.add.at(lam, ej, d_feats[:, 2] / scales.t_ref)
        else:
            if factors["phi"] != 0.0:
                dc = dc + L.loss_phi_values_backward(rec.c, graph.edge_length,
                                                     factors["phi"])
            phi_grads, d_t_phi = connectivity_backward(
                pack.phi, graph, rec.phi_cache, dc, scales)
            lam += d_t_phi
        for key in ("W1", "b1", "w2", "b2"):
            grads[f"phi.{key}"] += phi_grads[key]

        # dissipation net: transition plus its regularizer
        if factors["psi"] != 0.0:
            dq_psi = dq_psi + L.loss_psi_values_backward(rec.q_psi, interior,
                                                         factors["psi"])
        psi_grads, d_t_psi = dissipation_backward(pack.psi, rec.psi_cache,
                                                  dq_psi, scales)
        lam += d_t_psi
        for key in ("W1", "b1", "w2", "b2"):
            grads[f"psi.{key}"] += psi_grads[key]

    return grads


# ---------------------------------------------------------------------------
# curriculum orchestration


def _detect_center(frame: ThermalFrame, manifest: SequenceManifest):
    return detect_laser(frame, manifest.threshold_K, manifest.pixel_pitch_mm)


def estimate_laser_intensity(sequence: ThermalSequence, cfg: TrainConfig) -> float:
    """Data-informed starting intensity: hotspot height over the frame
    median in the first frame with a detection, spread over the interval's
    micro-steps.  The optimizer only has to fine-tune from there."""
    manifest = sequence.manifest
    for frame in sequence.frames:
        if _detect_center(frame, manifest) is not None:
            peak = float(frame.values.max() - np.median(frame.values))
            return max(0.0, peak / cfg.substeps)
    return 0.0


def build_intervals(graph: LayeredGraph, layer_frames: list,
                    manifest: SequenceManifest, use_laser: bool) -> list:
    """Data intervals of one layer window.

    The laser position is detected in each interval's end frame, which
    carries the freshest imprint of where flux landed during the interval."""
    intervals = []
    for start, end in zip(layer_frames, layer_frames[1:]):
        obs_idx, obs_values = observed_values(graph, end, manifest)
        center = _detect_center(end, manifest) if use_laser else None
        intervals.append(Interval(dt=end.time_s - start.time_s, obs_idx=obs_idx,
                                  obs_values=obs_values, laser_center=center,
                                  end_time=end.time_s))
    return intervals


def _initial_hidden(sequence: ThermalSequence, first_layer: int) -> dict:
    """Position -> temperature for the fully observed first build layer."""
    manifest = sequence.manifest
    frame = sequence.frames_for_layer(first_layer)[-1]
    pts = {}
    rows, cols = np.nonzero(frame.values > manifest.threshold_K)
    for r, c in zip(rows, cols):
        pos = (c * manifest.pixel_pitch_mm, r * manifest.pixel_pitch_mm,
               first_layer * manifest.layer_height_mm)
        pts[pos] = float(frame.values[r, c])
    return pts


def _stage_initial_state(graph: LayeredGraph, hidden: dict,
                         first_frame: ThermalFrame,
                         manifest: SequenceManifest) -> np.ndarray:
    """Observed top values from the frame; everything else from the handoff.

    Vertices with no carried value (re-pruned window points resurfacing)
    fall back to the nearest carried position."""
    n = graph.n_vertices
    t0 = np.full(n, np.nan)
    for i in range(n):
        key = (graph.positions[i, 0], graph.positions[i, 1], graph.positions[i, 2])
        if key in hidden:
            t0[i] = hidden[key]
    top_idx, obs = observed_values(graph, first_frame, manifest)
    t0[top_idx] = obs
    missing = np.nonzero(np.isnan(t0))[0]
    if len(missing):
        have = np.nonzero(~np.isnan(t0))[0]
        tree = cKDTree(graph.positions[have])
        _, nearest = tree.query(graph.positions[missing])
        t0[missing] = t0[have[nearest]]
    return t0


def prepare_stages(sequence: ThermalSequence, graphs: dict,
                   cfg: TrainConfig) -> list[StageData]:
    """Stage list with initial states chained through gap simulation later.

    ``graphs`` maps layer index -> accreted graph (from the second layer
    on); each stage's window is that layer's frames.  Initial states are
    filled in lazily during training since they depend on the model."""
    manifest = sequence.manifest
    stages = []
    for layer in sorted(graphs):
        frames = sequence.frames_for_layer(layer)
        if len(frames) < 2:
            raise ValidationError(f"layer {layer}: need at least 2 frames to train")
        graph = graphs[layer]
        stages.append(StageData(
            layer_index=layer, graph=graph, t0=None,
            intervals=build_intervals(graph, frames, manifest, cfg.laser),
        ))
    return stages


def _graph_state_dict(graph: LayeredGraph, values: np.ndarray) -> dict:
    return {(graph.positions[i, 0], graph.positions[i, 1], graph.positions[i, 2]):
            float(values[i]) for i in range(graph.n_vertices)}


def _simulate_gap(stage: StageData, final_values: np.ndarray, next_first_time: float,
                  pack: ParamPack, cfg: TrainConfig,
                  scales: FeatureScales) -> np.ndarray:
    """Advance the trained model across the recoat gap (no laser, no loss)."""
    gap = next_first_time - stage.intervals[-1].end_time
    if gap <= 0:
        return final_values
    interval = Interval(dt=gap, obs_idx=np.empty(0, dtype=int),
                        obs_values=np.empty(0), laser_center=None,
                        end_time=next_first_time)
    values = final_values
    micro_dt = gap / cfg.substeps
    step_cfg = StepConfig(delta_t=micro_dt, substeps=1, scheme=cfg.scheme,
                          cg_tol=cfg.cg_tol, cg_max_iter=cfg.cg_max_iter)
    graph = stage.graph
    for _ in range(cfg.substeps):
        c, _ = connectivity(pack.phi, graph, values, scales)
        lap = SparseLaplacian(graph.n_vertices, graph.edge_index, c)
        q_psi, _ = dissipation(pack.psi, graph, values, scales)
        state = step(HeatState(values, 0.0, graph.top_layer_mask()),
                     lap, q_psi, step_cfg, None)
        values = state.values
    return values


def compute_scales(graph: LayeredGraph, t_ref: float) -> FeatureScales:
    """Reference magnitudes from the initial graph, frozen for the run."""
    rho_ref = float(np.median(graph.edge_length))
    sid = graph.sid[graph.sid > 0]
    sid_ref = float(np.median(sid)) if len(sid) else 1.0
    return FeatureScales(t_ref=t_ref, rho_ref=rho_ref, sid_ref=sid_ref)


@dataclass
class StageSummary:
    layer_index: int
    iterations: int
    converged: bool
    final_report: L.LossReport


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    stage_summaries: list


def train_curriculum(sequence: ThermalSequence, graphs: dict, cfg: TrainConfig,
                     start_from: Checkpoint | None = None,
                     checkpoint_path: str | None = None) -> TrainResult:
    """Layer-by-layer curriculum training; returns the final checkpoint.

    Per stage: train on that layer's window until the normalized prediction
    loss drops under ``cfg.stage_tol`` or the per-stage cap
    ``cfg.budget // n_stages`` is hit (a cap hit is recorded, not fatal),
    then simulate across the recoat gap and hand the internal state to the
    next stage as a constant."""
    stages = prepare_stages(sequence, graphs, cfg)
    manifest = sequence.manifest
    first_graph = stages[0].graph

    if start_from is not None:
        pack = ParamPack.from_checkpoint(start_from)
        scales = start_from.scales
    else:
        pack = ParamPack.initialize(cfg.hidden_width, cfg.seed)
        scales = compute_scales(first_graph, cfg.t_ref)
        if cfg.laser:
            pack.laser_intensity = estimate_laser_intensity(sequence, cfg)

    weights = cfg.weights()
    w = weights.as_dict()
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps_adam=cfg.eps_adam)
    stage_cap = max(1, cfg.budget // max(1, len(stages)))

    history: list[dict] = []
    summaries: list[StageSummary] = []
    first_layer = sequence.layers()[0]
    hidden = _initial_hidden(sequence, first_layer)

    for si, stage in enumerate(stages):
        first_frame = sequence.frames_for_layer(stage.layer_index)[0]
        stage.t0 = _stage_initial_state(stage.graph, hidden, first_frame, manifest)

        snapshot = None
        report = None
        converged = False
        iterations = 0
        for it in range(stage_cap):
            result = rollout(stage.graph, stage.t0, stage.intervals, pack, cfg,
                             scales, keep_records=True)
            if snapshot is None:
                snapshot = L.floor_normalizers(result.raw)
            report = L.total_loss(result.raw, weights, snapshot)
            history.append({"stage": stage.layer_index, "iteration": it,
                            **report.as_line()})
            if report.normalized["data"] <= cfg.stage_tol:
                converged = True
                break
            factors = {t: w[t] / snapshot[t] for t in L.ALL_TERMS}
            grads = backward_through_rollout(stage.graph, result.records, pack,
                                             cfg, scales, factors)
            pack = ParamPack.from_dict(adam_update(adam, pack.to_dict(), grads))
            iterations += 1
        summaries.append(StageSummary(stage.layer_index, iterations, converged,
                                      report))

        # hand the predicted internal state to the next stage
        final = rollout(stage.graph, stage.t0, stage.intervals, pack, cfg,
                        scales, keep_records=False)
        final_values = final.states[-1].values
        if si + 1 < len(stages):
            next_first = sequence.frames_for_layer(stages[si + 1].layer_index)[0]
            carried = _simulate_gap(stage, final_values, next_first.time_s,
                                    pack, cfg, scales)
            hidden = _graph_state_dict(stage.graph, carried)
        if checkpoint_path is not None:
            ckpt = _make_checkpoint(pack, scales, cfg, summaries)
            from .checkpoint import save_checkpoint
            save_checkpoint(ckpt, checkpoint_path)

    ckpt = _make_checkpoint(pack, scales, cfg, summaries)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(ckpt, checkpoint_path)
    return TrainResult(checkpoint=ckpt, history=history, stage_summaries=summaries)


def _make_checkpoint(pack: ParamPack, scales: FeatureScales, cfg: TrainConfig,
                     summaries: list) -> Checkpoint:
    return Checkpoint(
        phi=pack.phi.copy(), psi=pack.psi.copy(), scales=scales,
        laser_intensity=float(pack.laser_intensity),
        laser_eta_raw=float(pack.laser_eta_raw),
        material=cfg.material,
        training_meta={
            "scheme": cfg.scheme,
            "substeps": cfg.substeps,
            "reg_subset": cfg.reg_subset,
            "weight_level": cfg.weight_level,
            "budget": cfg.budget,
            "iterations": sum(s.iterations for s in summaries),
            "stages": [{"layer": s.layer_index, "iterations": s.iterations,
                        "converged": s.converged} for s in summaries],
        },
    )


@dataclass
class InferenceResult:
    """Predictions per stage with the matching observations for scoring."""

    stage_layers: list
    predictions: list    # per stage: list of HeatState at interval ends
    observations: list   # per stage: list of (obs_idx, obs_values)
    raw_losses: list     # per stage: raw loss terms of the frozen rollout


def inference_rollout(ckpt: Checkpoint, sequence: ThermalSequence, graphs: dict,
                      cfg: TrainConfig) -> InferenceResult:
    """Frozen-parameter curriculum pass over a sequence (no training)."""
    pack = ParamPack.from_checkpoint(ckpt)
    scales = ckpt.scales
    stages = prepare_stages(sequence, graphs, cfg)
    manifest = sequence.manifest
    hidden = _initial_hidden(sequence, sequence.layers()[0])

    result = InferenceResult([], [], [], [])
    for si, stage in enumerate(stages):
        first_frame = sequence.frames_for_layer(stage.layer_index)[0]
        stage.t0 = _stage_initial_state(stage.graph, hidden, first_frame, manifest)
        roll = rollout(stage.graph, stage.t0, stage.intervals, pack, cfg,
                       scales, keep_records=False)
        result.stage_layers.append(stage.layer_index)
        result.predictions.append(roll.states)
        result.observations.append([(iv.obs_idx, iv.obs_values)
                                    for iv in stage.intervals])
        result.raw_losses.append(roll.raw)
        final_values = roll.states[-1].values
        if si + 1 < len(stages):
            next_first = sequence.frames_for_layer(stages[si + 1].layer_index)[0]
            carried = _simulate_gap(stage, final_values, next_first.time_s,
                                    pack, cfg, scales)
            hidden = _graph_state_dict(stage.graph, carried)
    return result


def transfer(base: Checkpoint, sequence: ThermalSequence, graphs: dict,
             mode: str, cfg: TrainConfig,
             checkpoint_path: str | None = None):
    """Reuse a trained checkpoint on new data.

    ``inference`` runs the frozen model over the sequence and returns an
    :class:`InferenceResult`; ``finetune`` restarts training from the
    checkpoint's parameters with fresh optimizer moments and the (reduced)
    budget in ``cfg``, returning a :class:`TrainResult`."""
    first_graph = graphs[min(graphs)]
    if base.phi.input_dim != EDGE_FEATURE_DIM or base.psi.input_dim != VERTEX_FEATURE_DIM:
        raise ValidationError("checkpoint feature dimensions do not match this featurizer")
    if mode == "inference":
        return inference_rollout(base, sequence, graphs, cfg)
    if mode == "finetune":
        if cfg.budget == 0:
            return inference_rollout(base, sequence, graphs, cfg)
        return train_curriculum(sequence, graphs, cfg, start_from=base,
                                checkpoint_path=checkpoint_path)
    raise ValidationError(f"unknown transfer mode {mode!r}")
