"""Evaluation metrics, experiment runners, and state exporters.

The headline relative error divides the RMS top-surface prediction error by
the mean squared deviation of the observations from their mean, exactly as
reported; a dimensionless RMS/RMS variant (labelled ``nrmse``) is carried
alongside it in every report.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as L
from .checkpoint import Checkpoint
from .frames import ThermalSequence
from .graphs import LayeredGraph
from .training import (InferenceResult, TrainConfig, inference_rollout,
                       train_curriculum)
from .validation import ValidationError


def _error_parts(pred_values: np.ndarray, obs_values: np.ndarray,
                 top_idx: np.ndarray) -> tuple[float, float]:
    if len(top_idx) == 0:
        raise ValidationError("no observable vertices")
    p = pred_values[top_idx]
    o = np.asarray(obs_values, dtype=np.float64)
    rms = math.sqrt(float(np.mean((p - o) ** 2)))
    meansq = float(np.mean((o - o.mean()) ** 2))
    return rms, meansq


def relative_error(pred_values: np.ndarray, obs_values: np.ndarray,
                   top_idx: np.ndarray) -> float:
    """RMS error over mean squared observation spread (as reported)."""
    rms, meansq = _error_parts(pred_values, obs_values, top_idx)
    if meansq == 0.0:
        raise ValidationError("constant observation field")
    return rms / meansq


def relative_error_nrmse(pred_values: np.ndarray, obs_values: np.ndarray,
                         top_idx: np.ndarray) -> float:
    """Dimensionless variant: RMS error over RMS observation spread."""
    rms, meansq = _error_parts(pred_values, obs_values, top_idx)
    if meansq == 0.0:
        raise ValidationError("constant observation field")
    return rms / math.sqrt(meansq)


def absolute_error(pred_values: np.ndarray, obs_values: np.ndarray,
                   top_idx: np.ndarray) -> np.ndarray:
    """Per-vertex |prediction - observation| over the top surface."""
    return np.abs(pred_values[top_idx] - np.asarray(obs_values, dtype=np.float64))


@dataclass
class EvalReport:
    """Per-timepoint and per-layer scores of one frozen inference pass."""

    per_timepoint: list = field(default_factory=list)
    mean_eps_r: float = 0.0
    mean_eps_r_nrmse: float = 0.0
    per_layer_eps_r: dict = field(default_factory=dict)
    per_layer_energy: dict = field(default_factory=dict)
    eps_abs_time: float = 0.0
    eps_abs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "per_timepoint": self.per_timepoint,
            "mean_eps_r": self.mean_eps_r,
            "mean_eps_r_nrmse": self.mean_eps_r_nrmse,
            "per_layer_eps_r": {str(k): v for k, v in self.per_layer_eps_r.items()},
            "per_layer_energy": {str(k): v for k, v in self.per_layer_energy.items()},
            "eps_abs_time": self.eps_abs_time,
            "eps_abs": self.eps_abs,
            "timings": self.timings,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def report_from_inference(result: InferenceResult) -> EvalReport:
    report = EvalReport()
    eps_all, nrmse_all = [], []
    for layer, states, obs, raw in zip(result.stage_layers, result.predictions,
                                       result.observations, result.raw_losses):
        layer_eps = []
        for state, (obs_idx, obs_values) in zip(states, obs):
            eps = relative_error(state.values, obs_values, obs_idx)
            nrmse = relative_error_nrmse(state.values, obs_values, obs_idx)
            layer_eps.append(eps)
            eps_all.append(eps)
            nrmse_all.append(nrmse)
            report.per_timepoint.append({
                "time_s": state.time_s,
                "layer": layer,
                "eps_r": eps,
                "eps_r_nrmse": nrmse,
                "max_T": float(state.values.max()),
                "mean_T": float(state.values.mean()),
            })
        report.per_layer_eps_r[layer] = float(np.mean(layer_eps))
        report.per_layer_energy[layer] = L.composite_energy_metric(raw)
    report.mean_eps_r = float(np.mean(eps_all))
    report.mean_eps_r_nrmse = float(np.mean(nrmse_all))

    last_states = result.predictions[-1]
    last_obs_idx, last_obs = result.observations[-1][-1]
    report.eps_abs_time = last_states[-1].time_s
    report.eps_abs = absolute_error(last_states[-1].values, last_obs,
                                    last_obs_idx).tolist()
    return report


def timed_median(fn, repeats: int = 3):
    """Run ``fn`` ``repeats`` times; returns (last result, median seconds)."""
    spans = []
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        spans.append(time.perf_counter() - t0)
    return result, float(np.median(spans))


def evaluate_checkpoint(ckpt: Checkpoint, sequence: ThermalSequence,
                        graphs: dict, cfg: TrainConfig,
                        timing_repeats: int = 1) -> EvalReport:
    """Frozen inference over a sequence plus the full metric report."""
    result, span = timed_median(
        lambda: inference_rollout(ckpt, sequence, graphs, cfg),
        repeats=timing_repeats)
    report = report_from_inference(result)
    report.timings["inference_s"] = span
    report.timings["inference_repeats"] = timing_repeats
    return report


ABLATION_CELLS = [
    ("all", "high"), ("all", "normal"), ("all", "low"),
    ("math", "high"), ("math", "normal"), ("math", "low"),
    ("phys", "high"), ("phys", "normal"), ("phys", "low"),
    ("none", "none"),
]


def run_ablation(sequence: ThermalSequence, graphs: dict, base_cfg: TrainConfig,
                 cells: list | None = None) -> list[dict]:
    """Train one model per (regularizer subset, weight level) grid cell.

    All cells share the seed and budget of ``base_cfg``.  Each row reports
    the model fit as the stage-mean of the final snapshot-normalized loss
    terms, so cells are comparable on the scale the training itself used
    (a raw-sum column per term is included as well)."""
    rows = []
    for subset, level in (cells if cells is not None else ABLATION_CELLS):
        cfg = replace(base_cfg, reg_subset=subset, weight_level=level)
        trained = train_curriculum(sequence, graphs, cfg)
        finals = [s.final_report for s in trained.stage_summaries]
        row = {"regularization": subset, "weight": level}
        for term in ("data", "phi", "psi", "energy"):
            row[f"loss_{term}"] = float(np.mean(
                [r.normalized[term] for r in finals]))
            row[f"raw_{term}"] = float(np.sum([r.raw[term] for r in finals]))
        rows.append(row)
    return rows


def run_scheme_comparison(sequence: ThermalSequence, graphs: dict,
                          base_cfg: TrainConfig,
                          schemes=("explicit", "crank_nicolson")) -> dict:
    """Train each scheme identically; report per-layer means of both metrics."""
    out = {}
    for scheme in schemes:
        cfg = replace(base_cfg, scheme=scheme)
        trained = train_curriculum(sequence, graphs, cfg)
        frozen = inference_rollout(trained.checkpoint, sequence, graphs, cfg)
        report = report_from_inference(frozen)
        out[scheme] = {
            "mean_eps_r": float(np.mean(list(report.per_layer_eps_r.values()))),
            "mean_energy": float(np.mean(list(report.per_layer_energy.values()))),
        }
    return out


# ---------------------------------------------------------------------------
# exporters

EXPORT_FORMATS = ("csv", "vtk", "json-plot")


def export_states(states: list, graph: LayeredGraph, fmt: str, out_dir: str,
                  observations: list | None = None,
                  basename: str = "state") -> list[str]:
    """Write predicted states as csv, legacy VTK, or a plot-ready series.

    ``states`` is a list of :class:`~heatgraph.diffusion.HeatState` on
    ``graph``; vertex order in every format follows the graph's vertex ids.
    ``observations`` (optional, aligned ``(obs_idx, obs_values)`` tuples)
    adds a relative-error column to the json-plot series."""
    if fmt not in EXPORT_FORMATS:
        raise ValidationError(f"unknown export format {fmt!r}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if fmt == "csv":
        for k, state in enumerate(states):
            path = os.path.join(out_dir, f"{basename}_{k:05d}.csv")
            with open(path, "w") as fh:
                fh.write("id,x,y,z,temperature\n")
                for i in range(graph.n_vertices):
                    x, y, z = (float(v) for v in graph.positions[i])
                    fh.write(f"{i},{x!r},{y!r},{z!r},{float(state.values[i])!r}\n")
            written.append(path)
    elif fmt == "vtk":
        for k, state in enumerate(states):
            path = os.path.join(out_dir, f"{basename}_{k:05d}.vtk")
            _write_vtk(path, graph, state)
            written.append(path)
    else:
        series = []
        for k, state in enumerate(states):
            point = {
                "time_s": state.time_s,
                "max_T": float(state.values.max()),
                "mean_T": float(state.values.mean()),
            }
            if observations is not None:
                obs_idx, obs_values = observations[k]
                point["eps_r"] = relative_error(state.values, obs_values, obs_idx)
            series.append(point)
        path = os.path.join(out_dir, f"{basename}_series.json")
        with open(path, "w") as fh:
            json.dump(series, fh, indent=1)
            fh.write("\n")
        written.append(path)
    return written


def _write_vtk(path: str, graph: LayeredGraph, state) -> None:
    """Legacy-format unstructured grid: vertices, edges as line cells."""
    n, e = graph.n_vertices, graph.n_edges
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("heatgraph state export\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {n} double\n")
        for i in range(n):
            x, y, z = (float(v) for v in graph.positions[i])
            fh.write(f"{x!r} {y!r} {z!r}\n")
        fh.write(f"CELLS {e} {3 * e}\n")
        for i, j in graph.edge_index:
            fh.write(f"2 {i} {j}\n")
        fh.write(f"CELL_TYPES {e}\n")
        fh.write("\n".join(["3"] * e) + ("\n" if e else ""))
        fh.write(f"POINT_DATA {n}\n")
        fh.write("SCALARS temperature double 1\nLOOKUP_TABLE default\n")
        for i in range(n):
            fh.write(f"{float(state.values[i])!r}\n")
