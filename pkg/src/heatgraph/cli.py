"""Command-line interface.

Subcommands cover the full pipeline: ``synth`` generates a synthetic
sequence, ``build-graph`` turns frames into per-layer graphs, ``train``
runs the curriculum, ``transfer`` reuses a checkpoint for inference or
fine-tuning, ``eval`` scores a model, ``ablation`` and ``compare-schemes``
run the standard experiments, and ``export`` converts predicted states for
plotting tools.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time
from dataclasses import fields, replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import (export_states, evaluate_checkpoint, run_ablation,
                         run_scheme_comparison, timed_median)
from .frames import load_sequence, save_sequence
from .graphs import GraphBuildParams, build_layered_graphs, load_graph, save_graph
from .synthetic import SynthConfig, SynthLaser, generate_synthetic
from .training import TrainConfig, train_curriculum, transfer
from .validation import ValidationError

SCHEME_ALIASES = {
    "euler": "explicit",
    "explicit": "explicit",
    "backward": "backward",
    "cn": "crank_nicolson",
    "crank_nicolson": "crank_nicolson",
    "crank-nicolson": "crank_nicolson",
}


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _synth_config(doc: dict) -> SynthConfig:
    doc = dict(doc)
    laser = doc.pop("laser", None)
    graph = doc.pop("graph", None)
    known = {f.name for f in fields(SynthConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown synth config keys: {sorted(unknown)}")
    cfg = SynthConfig(**doc)
    if laser is not None:
        cfg = replace(cfg, laser=SynthLaser(**laser))
    if graph is not None:
        cfg = replace(cfg, graph=GraphBuildParams(**graph))
    return cfg


def _train_config(doc: dict) -> TrainConfig:
    doc = dict(doc)
    if "scheme" in doc:
        doc["scheme"] = SCHEME_ALIASES[doc["scheme"]]
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**doc)


def _graph_path(out_dir: str, layer: int) -> str:
    return os.path.join(out_dir, f"graph_{layer:04d}.txt")


def _load_graph_dir(path: str) -> dict:
    graphs = {}
    for fname in sorted(glob.glob(os.path.join(path, "graph_*.txt"))):
        graph = load_graph(fname)
        graphs[graph.top_layer] = graph
    if not graphs:
        raise ValidationError(f"no graph_*.txt files in {path}")
    return graphs


def _sequence_from(frames_dir: str):
    manifest = os.path.join(frames_dir, "manifest.json")
    if not os.path.exists(manifest):
        raise ValidationError(f"no manifest.json in {frames_dir}")
    return load_sequence(manifest)


def _graphs_for(args, sequence) -> dict:
    if getattr(args, "graphs", None):
        return _load_graph_dir(args.graphs)
    return build_layered_graphs(sequence, GraphBuildParams())


def cmd_synth(args) -> int:
    cfg = _synth_config(_load_json(args.config))
    sequence, _ = generate_synthetic(cfg, seed=args.seed)
    manifest_path = save_sequence(sequence, args.out)
    print(f"wrote {len(sequence.frames)} frames and {manifest_path}")
    return 0


def cmd_build_graph(args) -> int:
    sequence = _sequence_from(args.frames)
    alpha = None if args.alpha == "auto" else float(args.alpha)
    params = GraphBuildParams(prune_target=args.prune_target, top_k=args.top_k,
                              alpha_mm=alpha)
    graphs = build_layered_graphs(sequence, params)
    os.makedirs(args.out, exist_ok=True)
    for layer, graph in sorted(graphs.items()):
        save_graph(graph, _graph_path(args.out, layer))
    print(f"wrote {len(graphs)} graphs to {args.out}")
    return 0


def _write_history(history, path):
    with open(path, "w") as fh:
        for line in history:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    sequence = _sequence_from(args.frames)
    graphs = _graphs_for(args, sequence)
    cfg = TrainConfig(
        scheme=SCHEME_ALIASES[args.scheme],
        reg_subset=args.reg,
        weight_level=args.weights,
        budget=args.budget,
        seed=args.seed,
        substeps=args.substeps,
        hidden_width=args.hidden_width,
        lr=args.lr,
        stage_tol=args.stage_tol,
        laser=not args.no_laser,
    )
    t0 = time.perf_counter()
    result = train_curriculum(sequence, graphs, cfg, checkpoint_path=args.out)
    span = time.perf_counter() - t0
    if args.history:
        _write_history(result.history, args.history)
    converged = sum(1 for s in result.stage_summaries if s.converged)
    print(f"trained {len(result.stage_summaries)} stages "
          f"({converged} converged) in {span:.1f}s; checkpoint at {args.out}")
    for s in result.stage_summaries:
        if not s.converged:
            print(f"warning: stage {s.layer_index} hit its iteration cap "
                  f"({s.iterations} iterations)")
    return 0


def _write_states(result, graphs, out_dir):
    """Heat states as `id temperature` text vectors plus an index file."""
    os.makedirs(out_dir, exist_ok=True)
    index = []
    for layer, states in zip(result.stage_layers, result.predictions):
        for k, state in enumerate(states):
            name = f"state_layer{layer:04d}_{k:03d}.txt"
            with open(os.path.join(out_dir, name), "w") as fh:
                for i, v in enumerate(state.values):
                    fh.write(f"{i} {float(v)!r}\n")
            index.append({"file": name, "layer": layer, "time_s": state.time_s})
    with open(os.path.join(out_dir, "states.json"), "w") as fh:
        json.dump(index, fh, indent=1)
        fh.write("\n")


def cmd_transfer(args) -> int:
    base = load_checkpoint(args.base)
    sequence = _sequence_from(args.frames)
    graphs = _graphs_for(args, sequence)
    meta = base.training_meta
    budget = args.budget
    if budget is None:
        budget = max(1, int(meta.get("budget", 4500)) // 2)  # reduced by default
    cfg = _train_config({
        "scheme": meta.get("scheme", "cn"),
        "substeps": meta.get("substeps", 4),
        "reg_subset": meta.get("reg_subset", "all"),
        "weight_level": meta.get("weight_level", "normal"),
        "budget": budget,
    })
    if args.mode == "inference":
        result = transfer(base, sequence, graphs, "inference", cfg)
        _write_states(result, graphs, args.out)
        print(f"wrote predicted states to {args.out}")
    else:
        result = transfer(base, sequence, graphs, "finetune", cfg,
                          checkpoint_path=args.out)
        save_checkpoint(result.checkpoint, args.out)
        print(f"fine-tuned checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.model)
    sequence = _sequence_from(args.frames)
    t0 = time.perf_counter()
    graphs = _graphs_for(args, sequence)
    build_span = time.perf_counter() - t0
    cfg = _train_config({"scheme": ckpt.training_meta.get("scheme", "cn"),
                         "substeps": ckpt.training_meta.get("substeps", 4)})
    report = evaluate_checkpoint(ckpt, sequence, graphs, cfg,
                                 timing_repeats=args.timing_repeats)
    report.timings["graph_build_s"] = build_span
    report.save(args.report)
    print(f"mean eps_r {report.mean_eps_r:.6f} "
          f"(nrmse {report.mean_eps_r_nrmse:.6f}); report at {args.report}")
    return 0


def cmd_ablation(args) -> int:
    doc = _load_json(args.config)
    synth_cfg = _synth_config(doc["synth"])
    sequence, _ = generate_synthetic(synth_cfg, seed=doc.get("seed", 0))
    graphs = build_layered_graphs(sequence, synth_cfg.graph)
    base_cfg = _train_config(doc.get("train", {}))
    cells = [tuple(c) for c in doc["cells"]] if "cells" in doc else None
    rows = run_ablation(sequence, graphs, base_cfg, cells)
    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, "ablation.json")
    with open(table_path, "w") as fh:
        json.dump(rows, fh, indent=1)
        fh.write("\n")
    header = f"{'regularization':>15} {'weight':>7} {'L_data':>12} {'L_phi':>12} " \
             f"{'L_psi':>12} {'L_energy':>12}"
    print(header)
    for row in rows:
        print(f"{row['regularization']:>15} {row['weight']:>7} "
              f"{row['loss_data']:>12.4g} {row['loss_phi']:>12.4g} "
              f"{row['loss_psi']:>12.4g} {row['loss_energy']:>12.4g}")
    print(f"table at {table_path}")
    return 0


def cmd_compare_schemes(args) -> int:
    doc = _load_json(args.config)
    synth_cfg = _synth_config(doc["synth"])
    sequence, _ = generate_synthetic(synth_cfg, seed=doc.get("seed", 0))
    graphs = build_layered_graphs(sequence, synth_cfg.graph)
    base_cfg = _train_config(doc.get("train", {}))
    schemes = [SCHEME_ALIASES[s] for s in doc.get("schemes", ("euler", "cn"))]
    out = run_scheme_comparison(sequence, graphs, base_cfg, schemes)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "scheme_comparison.json")
    with open(path, "w") as fh:
        json.dump(out, fh, indent=1)
        fh.write("\n")
    for scheme, row in out.items():
        print(f"{scheme:>16}: mean eps_r {row['mean_eps_r']:.6f}  "
              f"mean energy {row['mean_energy']:.6f}")
    print(f"results at {path}")
    return 0


def cmd_export(args) -> int:
    from .diffusion import HeatState
    index_path = os.path.join(args.states, "states.json")
    if not os.path.exists(index_path):
        raise ValidationError(f"no states.json index in {args.states}")
    with open(index_path) as fh:
        index = json.load(fh)
    graph = load_graph(args.graph)
    states = []
    for entry in index:
        values = np.empty(graph.n_vertices)
        with open(os.path.join(args.states, entry["file"])) as fh:
            for line in fh:
                i, v = line.split()
                values[int(i)] = float(v)
        states.append(HeatState(values, entry["time_s"],
                                graph.top_layer_mask()))
    written = export_states(states, graph, args.format, args.out)
    print(f"wrote {len(written)} file(s) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heatgraph",
        description="Layered thermal graphs and learnable heat diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic thermal sequence")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="build per-layer graphs from frames")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prune-target", type=int, default=400)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--alpha", default="auto",
                   help="circumradius cutoff in mm, or 'auto'")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="curriculum-train the diffusion model")
    p.add_argument("--graphs", help="directory of graph_*.txt (built if omitted)")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=sorted(SCHEME_ALIASES), default="cn")
    p.add_argument("--reg", choices=["all", "math", "phys", "none"], default="all")
    p.add_argument("--weights", choices=["high", "normal", "low", "none"],
                   default="normal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=4500)
    p.add_argument("--substeps", type=int, default=4)
    p.add_argument("--hidden-width", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--stage-tol", type=float, default=0.05)
    p.add_argument("--no-laser", action="store_true")
    p.add_argument("--history", help="write per-iteration loss lines here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="reuse a checkpoint on new data")
    p.add_argument("--base", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--graphs")
    p.add_argument("--mode", choices=["inference", "finetune"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="score a checkpoint against a sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--graphs")
    p.add_argument("--report", required=True)
    p.add_argument("--timing-repeats", type=int, default=3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", help="regularization-weight grid experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("compare-schemes", help="explicit vs Crank-Nicolson")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_schemes)

    p = sub.add_parser("export", help="convert predicted states for plotting")
    p.add_argument("--states", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--format", choices=["csv", "vtk", "json-plot"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
