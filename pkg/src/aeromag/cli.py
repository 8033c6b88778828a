"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources

import numpy as np

from . import classifier as mlp
from .errors import AeromagError, ConfigInvalid, DataError
from .euler import EulerConfig, SolutionSet, euler_sweep, filter_cluster
from .filters import SpectralPlan, apply_chain, derivative
from .geodata import grid_to_text, load_points, read_grid, sample_spacing_report
from .pipeline import (
    PRESETS,
    grid_points,
    load_config,
    run_pipeline,
    sub_seed,
    synth_demo,
)
from .products import ProfileSpec, depth_histogram, extract_profile, trend_analysis
from .spatialstats import csr_tests, descriptive_stats, nearest_neighbor_stats, pca

log = logging.getLogger("aeromag")


def demo_config_path():
    return str(resources.files("aeromag").joinpath("demo.json"))


def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise ConfigInvalid(path, f"cannot read config: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigInvalid(path, f"invalid JSON: {e}") from None


def _write(out, name, text):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    log.info("wrote %s", path)
    return path


def _euler_config(cfg, args):
    d = dict(cfg.get("euler", {}))
    if args.window is not None:
        d["window_size"] = args.window
    if args.si is not None:
        d["si_set"] = args.si
    if args.rms_accept is not None:
        d["rms_accept"] = args.rms_accept
    try:
        return EulerConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid("euler", str(e)) from None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_grid(args):
    raw = _read_json(args.config)
    raw["input"] = {"type": "points", "path": args.points}
    g = dict(raw.get("gridding", {}))
    if args.method:
        g["method"] = args.method
    if args.cell_size:
        g["cell_size"] = args.cell_size
    if args.max_radius:
        g["max_radius"] = args.max_radius
    raw["gridding"] = g
    cfg = load_config(raw, base_dir=os.getcwd())
    points = load_points(args.points)
    grid, georef = grid_points(cfg, points)
    _write(args.out, "grid.asc", grid_to_text(grid))
    _write(args.out, "spacing.json",
           json.dumps(sample_spacing_report(points, georef.cell_size).to_dict(), indent=2) + "\n")
    return 0


def _parse_chain(args, cfg):
    chain = list(cfg.get("filters", []))
    if args.chain:
        try:
            chain = json.loads(args.chain)
        except json.JSONDecodeError as e:
            raise ConfigInvalid("--chain", f"invalid JSON: {e}") from None
    raw = {"input": {"type": "grid", "path": args.grid}, "filters": chain}
    load_config(raw)                  # validates op names and parameters
    return chain


def cmd_filter(args):
    cfg = _read_json(args.config)
    chain = _parse_chain(args, cfg)
    plan = SpectralPlan(**cfg.get("spectral", {}))
    grid = read_grid(args.grid)
    out, height = apply_chain(grid, chain, plan)
    _write(args.out, "filtered.asc", grid_to_text(out))
    if args.derivatives:
        for a in ("x", "y", "z"):
            _write(args.out, f"d{a}.asc", grid_to_text(derivative(out, a, plan)))
    _write(args.out, "filter.json", json.dumps({"chain": chain, "continuation_height": height}, indent=2) + "\n")
    return 0


def cmd_euler(args):
    cfg = _read_json(args.config)
    config = _euler_config(cfg, args)
    T = read_grid(args.grid)
    if args.gradients:
        grads = [read_grid(p) for p in args.gradients]
    else:
        plan = SpectralPlan(**cfg.get("spectral", {}))
        grads = [derivative(T, a, plan) for a in ("x", "y", "z")]
    sols = euler_sweep(T, *grads, config=config, threads=args.threads, obs_z=args.obs_z)
    _write(args.out, "solutions.csv", sols.to_csv())
    _write(args.out, "euler_provenance.json", sols.provenance_json() + "\n")
    radius = args.cluster_radius or cfg.get("cluster_radius", 300.0)
    if len(sols):
        _write(args.out, "clusters.csv", filter_cluster(sols, radius).to_csv())
    print(f"{len(sols)} solutions accepted; rejected {sols.rejected_counts}")
    return 0


def cmd_stats(args):
    sols = SolutionSet.from_csv(args.solutions)
    if len(sols) == 0:
        raise DataError("solution file is empty")
    xy = np.column_stack([sols.x0, sols.y0])
    _write(args.out, "pca.json", pca(np.column_stack([sols.x0, sols.y0, sols.z0]),
                                     labels=("X", "Y", "Z")).to_json(indent=2) + "\n")
    _write(args.out, "csr.json", csr_tests(xy, args.area).to_json(indent=2) + "\n")
    nns = nearest_neighbor_stats(xy)
    _write(args.out, "nns.json", nns.to_json(indent=2) + "\n")
    _write(args.out, "nn_distances.csv", nns.distances_csv())
    _write(args.out, "descriptive.json", json.dumps(
        {c: dict(descriptive_stats(getattr(sols, c)).rows()) for c in ("x0", "y0", "z0")},
        indent=2, sort_keys=True) + "\n")
    return 0


def cmd_classify(args):
    cfg = _read_json(args.config)
    sols = SolutionSet.from_csv(args.solutions)
    grid = read_grid(args.grid)
    plan = SpectralPlan(**cfg.get("spectral", {}))
    si_set = EulerConfig(**cfg.get("euler", {})).si_set
    tx, ty = derivative(grid, "x", plan), derivative(grid, "y", plan)
    sols.provenance = {"georef": grid.georef.to_dict()}
    if args.predict:
        if not args.model:
            raise ConfigInvalid("--model", "required with --predict")
        model = mlp.MlpModel.from_json(args.model)
        feats, labels = mlp.build_features(sols, tx, ty, model.si_set)
    else:
        feats, labels = mlp.build_features(sols, tx, ty, si_set)
        tc = dict(cfg.get("classifier", {}).get("training", {}))
        tc["seed"] = sub_seed(args.seed, "classifier")
        model, history = mlp.train_mlp(feats, labels, mlp.TrainingConfig(**tc), si_set)
        _write(args.out, "model.json", model.to_json() + "\n")
        _write(args.out, "training.json", json.dumps(history.to_dict(), indent=2) + "\n")
    prob = mlp.predict(model, feats)
    pred = np.argmax(prob, axis=1)
    cm = mlp.confusion_matrix(labels, pred, model.n_classes)
    _write(args.out, "confusion.csv", mlp.confusion_csv(cm, model.si_set))
    print(f"accuracy on input solutions: {np.mean(pred == labels):.4f}")
    return 0


def cmd_profile(args):
    sols = SolutionSet.from_csv(args.solutions)
    spec = ProfileSpec(args.axis, args.center, args.half_width, args.label)
    section = extract_profile(sols, spec)
    _write(args.out, f"profile_{args.label or spec.axis}.csv", section.to_csv())
    if len(sols):
        _write(args.out, "histogram.csv", depth_histogram(sols, args.bin_width).to_csv())
    if len(sols) >= 3:
        _write(args.out, "trend.json", trend_analysis(sols, args.anisotropy_threshold).to_json(indent=2) + "\n")
    print(f"{len(section)} solutions in profile corridor")
    return 0


def cmd_pipeline(args):
    path = args.config or demo_config_path()
    raw = _read_json(path)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = load_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))
    manifest = run_pipeline(cfg, args.out, threads=args.threads)
    print(f"run {manifest['status']}: {len(manifest['artifacts'])} artifacts in {args.out}")
    return 0


def cmd_synth_demo(args):
    synth_demo(args.preset, args.out, seed=args.seed or 0)
    print(f"wrote {os.path.join(args.out, 'config.json')}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=None, help="run seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="aeromag", description="Aeromagnetic Euler deconvolution toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("grid", parents=[common], help="grid scattered x,y,tmi points")
    s.add_argument("points")
    s.add_argument("--method", choices=("kriging", "nearest"))
    s.add_argument("--cell-size", type=float)
    s.add_argument("--max-radius", type=float)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("filter", parents=[common], help="apply a filter chain to a grid")
    s.add_argument("grid")
    s.add_argument("--chain", help='JSON list, e.g. \'[{"op": "upward_continue", "height": 500}]\'')
    s.add_argument("--derivatives", action="store_true", help="also write dx/dy/dz grids")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("euler", parents=[common], help="moving-window Euler deconvolution")
    s.add_argument("grid")
    s.add_argument("--gradients", nargs=3, metavar=("DX", "DY", "DZ"))
    s.add_argument("--window", type=int)
    s.add_argument("--si", type=float, nargs="+")
    s.add_argument("--rms-accept", type=float)
    s.add_argument("--obs-z", type=float, default=0.0, help="observation depth (negative = above datum)")
    s.add_argument("--cluster-radius", type=float)
    s.set_defaults(func=cmd_euler)

    s = sub.add_parser("stats", parents=[common], help="PCA, CSR, NNS and descriptive statistics")
    s.add_argument("solutions")
    s.add_argument("--area", type=float, help="survey area in m^2 (default: bounding box)")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("classify", parents=[common], help="train or apply the SI classifier")
    s.add_argument("solutions")
    s.add_argument("--grid", required=True, help="grid the solutions were computed from")
    s.add_argument("--predict", action="store_true")
    s.add_argument("--model")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("profile", parents=[common], help="profile section, depth histogram and trend")
    s.add_argument("solutions")
    s.add_argument("--axis", choices=("east_west", "north_south"), required=True)
    s.add_argument("--center", type=float, required=True)
    s.add_argument("--half-width", type=float, default=500.0)
    s.add_argument("--label", default="")
    s.add_argument("--bin-width", type=float, default=50.0)
    s.add_argument("--anisotropy-threshold", type=float, default=1.5)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("pipeline", parents=[common], help="run the full workflow from a config")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("synth-demo", parents=[common], help="write a synthetic preset config and grid")
    s.add_argument("--preset", choices=PRESETS, default="one_source")
    s.set_defaults(func=cmd_synth_demo)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    if args.command == "classify" and not args.predict and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except AeromagError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (ValueError, TypeError) as e:
        # invalid parameter values outside a config file
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
