"""Synthetic thermal sequences with retained ground truth.

A tapered square pyramid is printed layer by layer.  The reference dynamics
run with fine explicit time steps and edge weights ``alpha / rho^2`` on the
same graphs the package's own pipeline builds from the deposited point
lattice (threshold, density pruning, Delaunay, alpha filter), so a model
confined to that graph family can represent the truth exactly.  Because the
pruning pipeline depends only on geometry, a consumer rebuilding graphs
from the sampled frames reconstructs the reference graphs bit for bit.

Each layer deposits fresh material (optionally with a radial in-plane
contrast), an optional moving laser injects flux on the top surface, and an
optional sink drains the bottom boundary.  Top-view frames are sampled at
the configured rate with seeded Gaussian noise; the exact internal states
are retained for oracle checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .diffusion import HeatState, SparseLaplacian, StepConfig, explicit_step
from .frames import (FrameEntry, LaserSource, SequenceManifest, ThermalFrame,
                     ThermalSequence, laser_flux_at)
from .graphs import (BOTTOM, GraphBuildParams, LayeredGraph, PointCloud3,
                     accrete_layer, construct_graph, prune, removable_mask)
from .validation import ValidationError, check_positive


@dataclass(frozen=True)
class SynthLaser:
    intensity: float        # Kelvin added per reference step at zero distance
    decay_eta: float = 2.0  # per mm
    # 'step': the raster advances every reference step; 'frame': it advances
    # once per frame interval, which a one-center-per-interval model can
    # represent exactly; 'layer': it parks at one spot per layer, which also
    # makes every detection unambiguous
    dwell: str = "step"


@dataclass(frozen=True)
class SynthConfig:
    n_layers: int = 20
    frames_per_layer: int = 5
    base_px: int = 9           # active square side at the first layer
    taper_px: float = 0.4      # side shrink per layer, pixels
    margin_px: int = 2         # powder border around the base in each frame
    pixel_pitch_mm: float = 2.0
    layer_height_mm: float = 2.0
    alpha_true: float = 1.0    # conductivity, mm^2/s
    frame_rate_hz: float = 3.0
    deposit_temp_K: float = 1200.0
    # radial in-plane contrast of fresh material: the deposit runs from
    # deposit_temp_K at the region center down by this much at the corners
    deposit_contrast_K: float = 600.0
    ambient_K: float = 400.0
    plate_dissipation: float = 0.0   # 1/s, applied at bottom-boundary vertices
    plate_sink_K: float = 400.0
    laser: SynthLaser | None = None
    noise_sigma_K: float = 1.0
    threshold_K: float = 423.15
    ref_substeps_per_frame: int = 8
    record_step_sums: bool = False
    graph: GraphBuildParams = field(default_factory=GraphBuildParams)

    def __post_init__(self):
        check_positive(self.n_layers, "n_layers")
        check_positive(self.frames_per_layer, "frames_per_layer")
        check_positive(self.frame_rate_hz, "frame_rate_hz")
        check_positive(self.ref_substeps_per_frame, "ref_substeps_per_frame")
        if self.alpha_true < 0:
            raise ValidationError("alpha_true must be >= 0")
        if self.deposit_temp_K - abs(self.deposit_contrast_K) <= self.threshold_K:
            raise ValidationError("deposit pattern must stay above threshold_K")

    def layer_side(self, layer: int) -> int:
        return max(2, int(round(self.base_px - self.taper_px * layer)))

    def frame_shape(self) -> tuple[int, int]:
        side = self.base_px + 2 * self.margin_px
        return side, side


@dataclass
class GroundTruth:
    """Exact reference states retained alongside the sampled frames.

    ``frame_values[k]`` lives on ``frame_positions[k]`` (layer 0 frames use
    the planar lattice, later ones the accreted graph of their layer);
    ``graphs`` are the pipeline graphs the simulation ran on.
    """

    graphs: dict = field(default_factory=dict)
    frame_values: list = field(default_factory=list)
    frame_positions: list = field(default_factory=list)
    frame_layers: list = field(default_factory=list)
    times: list = field(default_factory=list)
    step_sums: list = field(default_factory=list)
    config: SynthConfig = None


def _active_pixels(cfg: SynthConfig, layer: int) -> np.ndarray:
    """(k, 2) array of (row, col) for the layer's deposited region."""
    side = cfg.layer_side(layer)
    start = cfg.margin_px + (cfg.base_px - side) // 2
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    return np.stack([rows.ravel() + start, cols.ravel() + start], axis=1)


def _layer_points(cfg: SynthConfig, layer: int) -> np.ndarray:
    pix = _active_pixels(cfg, layer)
    pts = np.empty((len(pix), 3))
    pts[:, 0] = pix[:, 1] * cfg.pixel_pitch_mm
    pts[:, 1] = pix[:, 0] * cfg.pixel_pitch_mm
    pts[:, 2] = layer * cfg.layer_height_mm
    return pts


def _deposit_temps(cfg: SynthConfig, points: np.ndarray) -> np.ndarray:
    temps = np.full(len(points), cfg.deposit_temp_K)
    if cfg.deposit_contrast_K != 0.0:
        xy = points[:, :2]
        center = xy.mean(axis=0)
        r2 = np.sum((xy - center) ** 2, axis=1)
        rmax2 = r2.max()
        if rmax2 > 0:
            temps -= cfg.deposit_contrast_K * (r2 / rmax2)
    return temps


def _planar_edges(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor edges for the single-layer phase (no 3D complex yet)."""
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=2)
    pairs = tree.query_pairs(1.01 * dists[:, 1].min(), output_type="ndarray")
    edge_index = np.sort(pairs.astype(np.int64), axis=1)
    edge_index = edge_index[np.lexsort(edge_index.T[::-1])]
    d = points[edge_index[:, 0]] - points[edge_index[:, 1]]
    rho2 = np.einsum("ij,ij->i", d, d)
    return edge_index, rho2


def _laser_center(cfg: SynthConfig, layer: int, step_in_layer: int,
                  steps_per_layer: int) -> tuple[float, float]:
    """Raster position sweeping the active region once per layer."""
    act = _active_pixels(cfg, layer)
    k = (step_in_layer * len(act)) // max(1, steps_per_layer)
    row, col = act[min(k, len(act) - 1)]
    return (col * cfg.pixel_pitch_mm, row * cfg.pixel_pitch_mm)


class _ReferenceSimulator:
    """Explicit fine-stepping on one fixed vertex set."""

    def __init__(self, cfg: SynthConfig, positions, edge_index, rho2, bottom_mask):
        self.cfg = cfg
        self.positions = positions
        self.bottom = bottom_mask
        weights = cfg.alpha_true / rho2
        self.lap = SparseLaplacian(len(positions), edge_index, weights)
        self.dt_ref = (1.0 / cfg.frame_rate_hz) / cfg.ref_substeps_per_frame
        if cfg.alpha_true > 0 and self.dt_ref > self.lap.gershgorin_step_bound():
            raise ValidationError(
                f"reference step {self.dt_ref:.4g}s violates the explicit "
                f"stability bound {self.lap.gershgorin_step_bound():.4g}s; "
                f"raise ref_substeps_per_frame"
            )
        self.step_cfg = StepConfig(delta_t=self.dt_ref, substeps=1,
                                   scheme="explicit")

    def advance_interval(self, temps, top_mask, layer, step_in_layer,
                         steps_per_layer, truth: GroundTruth, lasing=True):
        cfg = self.cfg
        state = HeatState(temps, 0.0, top_mask)
        top_idx = np.nonzero(top_mask)[0]
        top_xy = self.positions[top_idx][:, :2]
        for _ in range(cfg.ref_substeps_per_frame):
            q = None
            if cfg.plate_dissipation > 0:
                q = np.where(self.bottom, cfg.plate_dissipation
                             * (state.values - cfg.plate_sink_K), 0.0)
            source = None
            if cfg.laser is not None and lasing:
                if cfg.laser.dwell == "layer":
                    center = _laser_center(cfg, layer, layer % 5, 5)
                elif cfg.laser.dwell == "frame":
                    frame_idx = step_in_layer // cfg.ref_substeps_per_frame
                    center = _laser_center(cfg, layer, frame_idx,
                                           cfg.frames_per_layer)
                else:
                    center = _laser_center(cfg, layer, step_in_layer,
                                           steps_per_layer)
                src = LaserSource(cfg.laser.intensity, cfg.laser.decay_eta, center)
                source = np.zeros(len(state.values))
                source[top_idx] = laser_flux_at(src, top_xy)
            state = explicit_step(state, self.lap, q, self.step_cfg, source)
            if cfg.record_step_sums:
                truth.step_sums.append(float(state.values.sum()))
            step_in_layer += 1
        return state.values, step_in_layer


def _carry_state(old_positions, old_values, graph: LayeredGraph,
                 fresh_points, fresh_temps) -> np.ndarray:
    """Map temperatures onto a new graph: carried by position, fresh from the
    deposit, anything else (re-pruned points resurfacing) from the nearest
    carried position."""
    lookup = {tuple(p): v for p, v in zip(old_positions, old_values)}
    for p, v in zip(fresh_points, fresh_temps):
        lookup[tuple(p)] = v
    n = graph.n_vertices
    values = np.full(n, np.nan)
    for i in range(n):
        v = lookup.get(tuple(graph.positions[i]))
        if v is not None:
            values[i] = v
    missing = np.nonzero(np.isnan(values))[0]
    if len(missing):
        have = np.nonzero(~np.isnan(values))[0]
        tree = cKDTree(graph.positions[have])
        _, nearest = tree.query(graph.positions[missing])
        values[missing] = values[have[nearest]]
    return values


def generate_synthetic(cfg: SynthConfig, seed: int = 0) -> tuple[ThermalSequence, GroundTruth]:
    """Simulate a printing job and sample its thermal frames.

    Frames for layer ``l`` occur at times ``(l * F + j) / rate``; the layer
    is deposited immediately before its first frame, so the recoat gap
    between layers spans exactly one frame interval.  Rejects configurations
    whose reference step would violate the explicit stability bound.
    """
    if cfg.n_layers < 2:
        raise ValidationError("need at least 2 layers")
    rng = np.random.default_rng(seed)
    dt_frame = 1.0 / cfg.frame_rate_hz
    height, width = cfg.frame_shape()
    truth = GroundTruth(config=cfg)
    frames: list[ThermalFrame] = []

    def emit_frame(t, layer, positions, values):
        grid = np.full((height, width), cfg.ambient_K)
        layer_pts = _layer_points(cfg, layer)
        on_layer = positions[:, 2] == layer * cfg.layer_height_mm
        pos_top = positions[on_layer]
        val_top = values[on_layer]
        tree = cKDTree(pos_top[:, :2])
        _, idx = tree.query(layer_pts[:, :2])
        rows = np.rint(layer_pts[:, 1] / cfg.pixel_pitch_mm).astype(int)
        cols = np.rint(layer_pts[:, 0] / cfg.pixel_pitch_mm).astype(int)
        grid[rows, cols] = val_top[idx]
        if cfg.noise_sigma_K > 0:
            grid = grid + rng.normal(0.0, cfg.noise_sigma_K, size=grid.shape)
        grid = np.maximum(grid, 1.0)
        frames.append(ThermalFrame(width=width, height=height, time_s=t,
                                   layer_index=layer, values=grid))
        truth.frame_values.append(values.copy())
        truth.frame_positions.append(positions)
        truth.frame_layers.append(layer)
        truth.times.append(t)

    steps_per_layer = cfg.frames_per_layer * cfg.ref_substeps_per_frame
    t = 0.0

    # layer 0: planar nearest-neighbor phase, fully observed
    pts0 = _layer_points(cfg, 0)
    temps = _deposit_temps(cfg, pts0)
    e0, rho2_0 = _planar_edges(pts0)
    sim = _ReferenceSimulator(cfg, pts0, e0, rho2_0,
                              np.ones(len(pts0), dtype=bool))
    positions = pts0
    step_in_layer = 0
    top_mask = np.ones(len(pts0), dtype=bool)
    for j in range(cfg.frames_per_layer):
        emit_frame(t, 0, positions, temps)
        temps, step_in_layer = sim.advance_interval(
            temps, top_mask, 0, step_in_layer, steps_per_layer, truth,
            lasing=j < cfg.frames_per_layer - 1)
        t += dt_frame

    # accreted-graph phase
    cloud = None
    graph = None
    for layer in range(1, cfg.n_layers):
        fresh_points = _layer_points(cfg, layer)
        fresh_temps = _deposit_temps(cfg, fresh_points)
        if graph is None:
            union = PointCloud3(
                np.concatenate([pts0, fresh_points]),
                np.concatenate([np.zeros(len(pts0), dtype=np.int64),
                                np.ones(len(fresh_points), dtype=np.int64)]),
            )
            population = int(removable_mask(union.layer_of, cfg.graph.top_k).sum())
            cloud = prune(union, min(cfg.graph.prune_target, population),
                          cfg.graph.top_k)
            new_graph = construct_graph(cloud, cfg.graph)
        else:
            cloud, new_graph = accrete_layer(cloud, fresh_points, layer, cfg.graph)
        temps = _carry_state(positions, temps, new_graph, fresh_points, fresh_temps)
        positions = new_graph.positions
        graph = new_graph
        truth.graphs[layer] = graph

        d = positions[graph.edge_index[:, 0]] - positions[graph.edge_index[:, 1]]
        rho2 = np.einsum("ij,ij->i", d, d)
        sim = _ReferenceSimulator(cfg, positions, graph.edge_index, rho2,
                                  graph.classes == BOTTOM)
        top_mask = graph.top_layer_mask()
        step_in_layer = 0
        for j in range(cfg.frames_per_layer):
            emit_frame(t, layer, positions, temps)
            last = layer == cfg.n_layers - 1 and j == cfg.frames_per_layer - 1
            if not last:
                temps, step_in_layer = sim.advance_interval(
                    temps, top_mask, layer, step_in_layer, steps_per_layer,
                    truth, lasing=j < cfg.frames_per_layer - 1)
            t += dt_frame

    entries = [FrameEntry(path=f"frame_{i:05d}.txt", time_s=f.time_s,
                          layer_index=f.layer_index)
               for i, f in enumerate(frames)]
    manifest = SequenceManifest(
        pixel_pitch_mm=cfg.pixel_pitch_mm,
        layer_height_mm=cfg.layer_height_mm,
        threshold_K=cfg.threshold_K,
        frame_rate_hz=cfg.frame_rate_hz,
        frames=entries,
    )
    return ThermalSequence(manifest=manifest, frames=frames), truth
