"""Metrics, reports, experiment runners, exporters."""

import json
import math

import numpy as np
import pytest

from conftest import random_connected_graph

from heatgraph.diffusion import HeatState
from heatgraph.evaluation import (EvalReport, absolute_error, evaluate_checkpoint,
                                  export_states, relative_error,
                                  relative_error_nrmse, report_from_inference,
                                  run_ablation, run_scheme_comparison)
from heatgraph.graphs import GraphBuildParams
from heatgraph.synthetic import SynthConfig, generate_synthetic
from heatgraph.training import TrainConfig, train_curriculum, inference_rollout
from heatgraph.validation import ValidationError

FAST_GRAPH = GraphBuildParams(prune_target=60, top_k=3)


class TestRelativeError:
    def test_perfect_prediction(self):
        pred = np.array([2.0, 0.0])
        assert relative_error(pred, pred, np.array([0, 1])) == 0.0

    def test_printed_form_hand_value(self):
        # obs [2, 0]: mean 1, mean-square spread 1; numerator RMS 0.1
        pred = np.array([2.1, 0.1])
        obs = np.array([2.0, 0.0])
        assert relative_error(pred, obs, np.array([0, 1])) == pytest.approx(0.1)

    def test_numerator_linearity(self):
        obs = np.array([2.0, 0.0])
        base = relative_error(np.array([2.1, 0.1]), obs, np.array([0, 1]))
        scaled = relative_error(np.array([2.3, 0.3]), obs, np.array([0, 1]))
        assert scaled == pytest.approx(3.0 * base)

    def test_constant_field_rejected(self):
        with pytest.raises(ValidationError, match="constant observation field"):
            relative_error(np.array([1.0, 1.0]), np.array([2.0, 2.0]),
                           np.array([0, 1]))

    def test_nrmse_variant_dimensionless(self):
        obs = np.array([2.0, 0.0])
        pred = np.array([2.1, 0.1])
        # RMS spread is 1.0 here, so both forms agree
        assert relative_error_nrmse(pred, obs, np.array([0, 1])) == pytest.approx(0.1)
        # scaling temperatures by 10 leaves nrmse invariant but not eps_r
        assert relative_error_nrmse(10 * pred, 10 * obs, np.array([0, 1])) \
            == pytest.approx(0.1)
        assert relative_error(10 * pred, 10 * obs, np.array([0, 1])) \
            == pytest.approx(0.01)


class TestAbsoluteError:
    def test_values(self):
        pred = np.array([1.1, 1.8, 5.0])
        obs = np.array([1.0, 2.0])
        out = absolute_error(pred, obs, np.array([0, 1]))
        assert np.allclose(out, [0.1, 0.2])
        assert out.shape == (2,)

    def test_perfect(self):
        pred = np.array([1.0, 2.0])
        assert np.array_equal(absolute_error(pred, pred, np.array([0, 1])),
                              np.zeros(2))


def trained_fixture(budget=8, **synth_over):
    kw = dict(n_layers=3, frames_per_layer=3, base_px=7, taper_px=0.5,
              noise_sigma_K=0.5, graph=FAST_GRAPH)
    kw.update(synth_over)
    seq, truth = generate_synthetic(SynthConfig(**kw), seed=21)
    cfg = TrainConfig(scheme="crank_nicolson", substeps=2, hidden_width=8,
                      budget=budget, lr=5e-3, seed=0, laser=False)
    result = train_curriculum(seq, truth.graphs, cfg)
    return seq, truth, cfg, result


class TestReports:
    def test_mean_matches_series(self):
        seq, truth, cfg, result = trained_fixture()
        report = evaluate_checkpoint(result.checkpoint, seq, truth.graphs, cfg)
        series = [p["eps_r"] for p in report.per_timepoint]
        assert report.mean_eps_r == pytest.approx(np.mean(series), rel=1e-15)
        series_n = [p["eps_r_nrmse"] for p in report.per_timepoint]
        assert report.mean_eps_r_nrmse == pytest.approx(np.mean(series_n), rel=1e-15)

    def test_report_fields_and_save(self, tmp_path):
        seq, truth, cfg, result = trained_fixture()
        report = evaluate_checkpoint(result.checkpoint, seq, truth.graphs, cfg,
                                     timing_repeats=2)
        assert set(report.per_layer_energy) == set(truth.graphs)
        assert len(report.eps_abs) > 0
        assert report.timings["inference_s"] > 0
        path = str(tmp_path / "report.json")
        report.save(path)
        doc = json.loads(open(path).read())
        assert doc["mean_eps_r"] == report.mean_eps_r
        assert len(doc["per_timepoint"]) == len(report.per_timepoint)

    def test_max_temperature_tracked(self):
        seq, truth, cfg, result = trained_fixture()
        inf = inference_rollout(result.checkpoint, seq, truth.graphs, cfg)
        report = report_from_inference(inf)
        for point, state in zip(report.per_timepoint,
                                [s for ss in inf.predictions for s in ss]):
            assert point["max_T"] == state.values.max()


class TestExperimentRunners:
    def test_ablation_single_cell(self):
        seq, truth, cfg, _ = trained_fixture(budget=4)
        rows = run_ablation(seq, truth.graphs, cfg, cells=[("all", "high")])
        assert len(rows) == 1
        row = rows[0]
        assert row["regularization"] == "all" and row["weight"] == "high"
        for key in ("loss_data", "loss_phi", "loss_psi", "loss_energy"):
            assert np.isfinite(row[key]) and row[key] >= 0

    def test_ablation_deterministic(self):
        seq, truth, cfg, _ = trained_fixture(budget=4)
        a = run_ablation(seq, truth.graphs, cfg, cells=[("none", "none")])
        b = run_ablation(seq, truth.graphs, cfg, cells=[("none", "none")])
        assert a == b

    def test_scheme_comparison_fields(self):
        seq, truth, cfg, _ = trained_fixture(budget=4)
        out = run_scheme_comparison(seq, truth.graphs, cfg)
        assert set(out) == {"explicit", "crank_nicolson"}
        for row in out.values():
            assert row["mean_eps_r"] >= 0 and np.isfinite(row["mean_eps_r"])
            assert row["mean_energy"] >= 0 and np.isfinite(row["mean_energy"])


class TestExportStates:
    def make_states(self, rng):
        g = random_connected_graph(10, rng)
        states = [HeatState(rng.uniform(300, 900, 10), 0.5 * k,
                            g.top_layer_mask()) for k in range(3)]
        return g, states

    def test_csv_roundtrip(self, tmp_path, rng):
        g, states = self.make_states(rng)
        files = export_states(states, g, "csv", str(tmp_path))
        assert len(files) == 3
        lines = open(files[1]).read().splitlines()
        assert lines[0] == "id,x,y,z,temperature"
        got = np.array([float(l.split(",")[4]) for l in lines[1:]])
        assert np.array_equal(got, states[1].values)
        coords = np.array([[float(v) for v in l.split(",")[1:4]]
                           for l in lines[1:]])
        assert np.array_equal(coords, g.positions)

    def test_vtk_structure(self, tmp_path, rng):
        g, states = self.make_states(rng)
        files = export_states(states[:1], g, "vtk", str(tmp_path))
        text = open(files[0]).read()
        assert "DATASET UNSTRUCTURED_GRID" in text
        assert f"POINTS {g.n_vertices} double" in text
        assert f"CELLS {g.n_edges} {3 * g.n_edges}" in text
        assert f"POINT_DATA {g.n_vertices}" in text
        # vertex order matches ids
        lines = text.splitlines()
        start = lines.index(f"POINTS {g.n_vertices} double") + 1
        first = [float(v) for v in lines[start].split()]
        assert np.allclose(first, g.positions[0])

    def test_json_plot_series(self, tmp_path, rng):
        g, states = self.make_states(rng)
        obs_idx = np.nonzero(g.top_layer_mask())[0]
        observations = [(obs_idx, s.values[obs_idx] + 0.1) for s in states]
        files = export_states(states, g, "json-plot", str(tmp_path),
                              observations=observations)
        series = json.loads(open(files[0]).read())
        assert len(series) == 3
        for point, state in zip(series, states):
            assert point["time_s"] == state.time_s
            assert point["max_T"] == state.values.max()
            assert "eps_r" in point

    def test_unknown_format(self, tmp_path, rng):
        g, states = self.make_states(rng)
        with pytest.raises(ValidationError, match="unknown export format"):
            export_states(states, g, "hdf5", str(tmp_path))
