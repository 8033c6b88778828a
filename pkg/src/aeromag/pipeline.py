"""End-to-end orchestration: input -> grid -> filters -> derivatives -> Euler
sweep -> clustering -> statistics -> optional classifier -> products.

Every stage writes its artifacts as soon as it finishes and refreshes
``manifest.json``, so a failed run leaves inspectable partial output with the
manifest marked incomplete. Nothing run-specific (timestamps, thread count,
output directory) is written, which keeps artifact hashes reproducible.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import classifier as mlp
from .errors import AeromagError, ConfigInvalid, EmptySolutionSet, TooFewPoints, DegenerateScatter
from .euler import EulerConfig, euler_sweep, filter_cluster, modal_si
from .filters import FILTER_OPS, SpectralPlan, apply_chain, derivative
from .geodata import (
    DEFAULT_CELL_SIZE,
    Grid,
    GridGeoref,
    VariogramModel,
    grid_kriging,
    grid_nearest,
    grid_to_text,
    load_points,
    read_grid,
    sample_spacing_report,
)
from .products import (
    DEFAULT_ANISOTROPY_THRESHOLD,
    DEFAULT_BIN_WIDTH,
    ProfileSpec,
    depth_histogram,
    extract_profile,
    trend_analysis,
)
from .spatialstats import csr_tests, descriptive_stats, nearest_neighbor_stats, pca
from .synthetics import DipoleSource, HomogeneousSource, add_noise, dipole_tmi, homogeneous_field

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
N_SUMMARY_CLUSTERS = 10


def sub_seed(seed, stage):
    """Stage seed derived from the run seed and the stage name."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _require(d, key, path):
    if not isinstance(d, dict):
        raise ConfigInvalid(path, "expected an object")
    if key not in d:
        raise ConfigInvalid(f"{path}.{key}", "missing")
    return d[key]


def _number(v, path, positive=False, allow_none=False):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigInvalid(path, f"expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise ConfigInvalid(path, f"must be > 0, got {v!r}")
    return float(v)


def _georef(d, path):
    try:
        return GridGeoref(
            _number(_require(d, "x_origin", path), f"{path}.x_origin"),
            _number(_require(d, "y_origin", path), f"{path}.y_origin"),
            _number(d.get("cell_size", DEFAULT_CELL_SIZE), f"{path}.cell_size", positive=True),
            int(_require(d, "n_cols", path)),
            int(_require(d, "n_rows", path)),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigInvalid):
            raise
        raise ConfigInvalid(path, str(e)) from None


@dataclass
class PipelineConfig:
    """Validated run configuration; ``raw`` is the snapshot stored in the manifest."""

    raw: dict
    seed: int | None
    input: dict
    gridding: dict
    filters: list
    derivatives: str
    euler: EulerConfig
    cluster_radius: float
    stats: dict
    classifier: dict
    products: dict
    spectral: SpectralPlan = field(default_factory=SpectralPlan)
    base_dir: str = "."

    def resolve(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)


def load_config(source, base_dir=None):
    """Parse and validate a JSON config (path, JSON text or dict)."""
    if isinstance(source, dict):
        raw = copy.deepcopy(source)
        base_dir = base_dir or "."
    else:
        text = str(source)
        if text.lstrip().startswith("{"):
            where = "<config>"
        else:
            where = text
            base_dir = base_dir or os.path.dirname(os.path.abspath(text))
            try:
                with open(text, encoding="utf-8") as f:
                    text = f.read()
            except OSError as e:
                raise ConfigInvalid(where, f"cannot read config: {e.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigInvalid(where, f"invalid JSON: {e}") from None
        base_dir = base_dir or "."
    if not isinstance(raw, dict):
        raise ConfigInvalid("config", "top level must be an object")

    seed = raw.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        raise ConfigInvalid("config.seed", "must be a non-negative integer")

    inp = _require(raw, "input", "config")
    kind = _require(inp, "type", "config.input")
    if kind == "synthetic":
        _georef(_require(inp, "georef", "config.input"), "config.input.georef")
        sources = _require(inp, "sources", "config.input")
        if not isinstance(sources, list) or not sources:
            raise ConfigInvalid("config.input.sources", "must be a non-empty list")
        for i, s in enumerate(sources):
            _make_source(s, f"config.input.sources[{i}]")
        noise = inp.get("noise_relative_sigma", 0.0)
        _number(noise, "config.input.noise_relative_sigma")
        if noise < 0:
            raise ConfigInvalid("config.input.noise_relative_sigma", "must be >= 0")
        if noise > 0 and seed is None:
            raise ConfigInvalid("config.seed", "required when noise is enabled")
    elif kind in ("points", "grid"):
        p = _require(inp, "path", "config.input")
        if not isinstance(p, str) or not p:
            raise ConfigInvalid("config.input.path", "must be a non-empty string")
    else:
        raise ConfigInvalid("config.input.type", f"expected synthetic, points or grid, got {kind!r}")

    gridding = raw.get("gridding", {"method": "kriging"})
    if kind == "points":
        method = gridding.get("method", "kriging")
        if method not in ("kriging", "nearest"):
            raise ConfigInvalid("config.gridding.method", f"expected kriging or nearest, got {method!r}")
        if method == "nearest":
            _number(_require(gridding, "max_radius", "config.gridding"), "config.gridding.max_radius", True)
        if "georef" in gridding:
            _georef(gridding["georef"], "config.gridding.georef")
        if "variogram" in gridding:
            try:
                VariogramModel(**gridding["variogram"])
            except (TypeError, ValueError) as e:
                raise ConfigInvalid("config.gridding.variogram", str(e)) from None

    chain = raw.get("filters", [])
    if not isinstance(chain, list):
        raise ConfigInvalid("config.filters", "must be a list")
    for i, step in enumerate(chain):
        op = _require(step, "op", f"config.filters[{i}]")
        if op not in FILTER_OPS:
            raise ConfigInvalid(f"config.filters[{i}].op", f"unknown op {op!r}; expected one of {FILTER_OPS}")
        if op == "upward_continue":
            _number(_require(step, "height", f"config.filters[{i}]"), f"config.filters[{i}].height", True)
        if op == "lowpass":
            _number(_require(step, "cutoff_wavelength", f"config.filters[{i}]"),
                    f"config.filters[{i}].cutoff_wavelength", True)

    deriv = raw.get("derivatives", "spectral")
    if deriv not in ("spectral", "analytic"):
        raise ConfigInvalid("config.derivatives", f"expected spectral or analytic, got {deriv!r}")
    if deriv == "analytic":
        if kind != "synthetic":
            raise ConfigInvalid("config.derivatives", "analytic derivatives need a synthetic input")
        if chain or inp.get("noise_relative_sigma", 0.0) > 0:
            raise ConfigInvalid("config.derivatives", "analytic derivatives exclude filters and noise")

    try:
        euler = EulerConfig(**raw.get("euler", {}))
    except (TypeError, ValueError) as e:
        raise ConfigInvalid("config.euler", str(e)) from None
    radius = _number(raw.get("cluster_radius", 300.0), "config.cluster_radius", True)

    stats = {"pca": True, "csr": True, "nns": True, "descriptive": True, "area_m2": None}
    stats.update(raw.get("stats", {}))
    _number(stats["area_m2"], "config.stats.area_m2", positive=True, allow_none=True)

    cls = {"enabled": False}
    cls.update(raw.get("classifier", {}))
    if cls["enabled"]:
        if seed is None:
            raise ConfigInvalid("config.seed", "required when the classifier is enabled")
        try:
            mlp.TrainingConfig(**cls.get("training", {}))
        except (TypeError, ValueError) as e:
            raise ConfigInvalid("config.classifier.training", str(e)) from None

    prod = {"profiles": [], "bin_width": DEFAULT_BIN_WIDTH,
            "anisotropy_threshold": DEFAULT_ANISOTROPY_THRESHOLD}
    prod.update(raw.get("products", {}))
    _number(prod["bin_width"], "config.products.bin_width", True)
    for i, p in enumerate(prod["profiles"]):
        try:
            ProfileSpec(**p)
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"config.products.profiles[{i}]", str(e)) from None

    spectral = raw.get("spectral", {})
    try:
        plan = SpectralPlan(**spectral)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid("config.spectral", str(e)) from None

    return PipelineConfig(raw, seed, inp, gridding, chain, deriv, euler, radius, stats, cls, prod,
                          plan, base_dir)


def _make_source(d, path):
    kind = _require(d, "kind", path)
    params = {k: v for k, v in d.items() if k != "kind"}
    try:
        if kind == "homogeneous":
            return HomogeneousSource(**params)
        if kind == "dipole":
            return DipoleSource(**params)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(path, str(e)) from None
    raise ConfigInvalid(f"{path}.kind", f"expected homogeneous or dipole, got {kind!r}")


# ---------------------------------------------------------------------------
# Artifact bookkeeping
# ---------------------------------------------------------------------------

class ArtifactWriter:
    def __init__(self, out_dir, config_snapshot):
        self.out_dir = out_dir
        self.snapshot = config_snapshot
        self.artifacts = []
        self.status = "incomplete"
        self.stage = None
        self.error = None
        os.makedirs(out_dir, exist_ok=True)

    def write(self, name, text):
        data = text.encode("utf-8")
        with open(os.path.join(self.out_dir, name), "wb") as f:
            f.write(data)
        self.artifacts = [a for a in self.artifacts if a["name"] != name]
        self.artifacts.append({
            "name": name,
            "stage": self.stage,
            "bytes": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
        })
        return os.path.join(self.out_dir, name)

    def manifest(self):
        m = {"status": self.status, "config": self.snapshot, "artifacts": self.artifacts}
        if self.error is not None:
            m["failed_stage"] = self.stage
            m["error"] = self.error
        return m

    def flush(self):
        text = json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n"
        with open(os.path.join(self.out_dir, MANIFEST), "w", encoding="utf-8", newline="\n") as f:
            f.write(text)


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def synthesize(config):
    """Evaluate the configured sources on the grid; returns (T, gradients or None)."""
    inp = config.input
    georef = _georef(inp["georef"], "config.input.georef")
    X, Y = georef.mesh()
    finc = float(inp.get("field_inclination", 90.0))
    fdec = float(inp.get("field_declination", 0.0))
    total = [np.zeros(georef.shape) for _ in range(4)]
    for i, s in enumerate(inp["sources"]):
        src = _make_source(s, f"config.input.sources[{i}]")
        if isinstance(src, HomogeneousSource):
            parts = homogeneous_field(src, X, Y, 0.0)
        else:
            parts = dipole_tmi(src, X, Y, finc, fdec, 0.0, gradients=True)
        for acc, p in zip(total, parts):
            acc += p
    T = Grid(georef, total[0], units_label="nT")
    sigma_rel = float(inp.get("noise_relative_sigma", 0.0))
    if sigma_rel > 0:
        sigma = sigma_rel * float(np.max(np.abs(total[0])))
        T = add_noise(T, sigma, sub_seed(config.seed, "noise"))
        return T, None, sigma
    grads = tuple(Grid(georef, g, units_label="nT/m") for g in total[1:])
    return T, grads, 0.0


def grid_points(config, points):
    g = config.gridding
    if "georef" in g:
        georef = _georef(g["georef"], "config.gridding.georef")
    else:
        cell = float(g.get("cell_size", DEFAULT_CELL_SIZE))
        x0 = float(points.x.min()) - 0.5 * cell
        y0 = float(points.y.min()) - 0.5 * cell
        nc = max(2, int(math.ceil((points.x.max() - x0) / cell)))
        nr = max(2, int(math.ceil((points.y.max() - y0) / cell)))
        georef = GridGeoref(x0, y0, cell, nc, nr)
    if g.get("method", "kriging") == "nearest":
        return grid_nearest(points, georef, float(g["max_radius"])), georef
    vg = VariogramModel(**g["variogram"]) if "variogram" in g else None
    return grid_kriging(points, georef, vg, int(g.get("neighborhood", 16))), georef


def cluster_summary(solutions, clusters, labels, si_set):
    order = np.argsort(-clusters.cluster_sizes, kind="stable")[:N_SUMMARY_CLUSTERS]
    rows = []
    for k in order:
        members = labels == k
        rows.append({
            "x0": float(clusters.x0[k]),
            "y0": float(clusters.y0[k]),
            "z0": float(clusters.z0[k]),
            "si": float(clusters.si[k]),
            "rms": float(clusters.rms[k]),
            "size": int(clusters.cluster_sizes[k]),
            "modal_si": modal_si(solutions.si[members], si_set),
        })
    return rows


def run_pipeline(config, out_dir, threads=1):
    """Run every stage and return the manifest dict."""
    if not isinstance(config, PipelineConfig):
        config = load_config(config)
    w = ArtifactWriter(out_dir, config.raw)
    summary = {}
    try:
        # -- input and gridding -------------------------------------------
        w.stage = "input"
        grads = None
        kind = config.input["type"]
        if kind == "synthetic":
            T, grads, sigma = synthesize(config)
            summary["noise_sigma"] = sigma
        elif kind == "grid":
            T = read_grid(config.resolve(config.input["path"]))
        else:
            points = load_points(config.resolve(config.input["path"]),
                                 crs_label=config.input.get("crs_label", ""))
            w.stage = "grid"
            T, georef = grid_points(config, points)
            w.write("spacing.json", _json(sample_spacing_report(points, georef.cell_size).to_dict()))
        w.write("grid.asc", grid_to_text(T))
        w.flush()

        # -- filters and derivatives --------------------------------------
        w.stage = "filter"
        height = 0.0
        if config.filters:
            T, height = apply_chain(T, config.filters, config.spectral)
            w.write("filtered.asc", grid_to_text(T))
        w.stage = "derivatives"
        if grads is None:
            grads = tuple(derivative(T, a, config.spectral) for a in ("x", "y", "z"))
        for a, g in zip(("x", "y", "z"), grads):
            w.write(f"d{a}.asc", grid_to_text(g))
        w.flush()

        # -- Euler --------------------------------------------------------
        w.stage = "euler"
        obs_z = -height
        sols = euler_sweep(T, *grads, config=config.euler, threads=threads, obs_z=obs_z,
                           grid_ids={"T": "filtered.asc" if config.filters else "grid.asc",
                                     "Tx": "dx.asc", "Ty": "dy.asc", "Tz": "dz.asc"})
        w.write("solutions.csv", sols.to_csv())
        w.write("euler_provenance.json", sols.provenance_json() + "\n")
        if len(sols) == 0:
            raise EmptySolutionSet("Euler sweep accepted no solutions")
        clusters, labels = filter_cluster(sols, config.cluster_radius, return_labels=True)
        w.write("clusters.csv", clusters.to_csv())
        summary.update(
            n_solutions=len(sols),
            n_clusters=len(clusters),
            rejected_counts=sols.rejected_counts,
            modal_si=modal_si(sols.si, config.euler.si_set),
            clusters=cluster_summary(sols, clusters, labels, config.euler.si_set),
        )
        w.flush()

        # -- statistics ---------------------------------------------------
        w.stage = "stats"
        xy = np.column_stack([sols.x0, sols.y0])
        st = config.stats
        if st["pca"]:
            w.write("pca.json", pca(np.column_stack([sols.x0, sols.y0, sols.z0]),
                                    labels=("X", "Y", "Z")).to_json(indent=2) + "\n")
        if st["csr"] and len(sols) >= 2:
            area = st["area_m2"] or T.georef.area
            w.write("csr.json", csr_tests(xy, area).to_json(indent=2) + "\n")
        if st["nns"] and len(sols) >= 2:
            nns = nearest_neighbor_stats(xy)
            w.write("nns.json", nns.to_json(indent=2) + "\n")
            w.write("nn_distances.csv", nns.distances_csv())
        if st["descriptive"]:
            w.write("descriptive.json", _json({
                name: dict(descriptive_stats(getattr(sols, name)).rows())
                for name in ("x0", "y0", "z0")
            }))
        w.flush()

        # -- classifier ---------------------------------------------------
        if config.classifier["enabled"]:
            w.stage = "classify"
            summary["classifier"] = _classify_stage(config, sols, grads, w)
            w.flush()

        # -- products -----------------------------------------------------
        w.stage = "products"
        prod = config.products
        for i, p in enumerate(prod["profiles"]):
            spec = ProfileSpec(**p)
            name = spec.label or f"{i}"
            w.write(f"profile_{name}.csv", extract_profile(sols, spec).to_csv())
        w.write("histogram.csv", depth_histogram(sols, prod["bin_width"]).to_csv())
        try:
            trend = json.loads(trend_analysis(sols, prod["anisotropy_threshold"]).to_json())
            trend["anisotropy_ratio"] = _json_safe(trend["anisotropy_ratio"])
            trend["status"] = "ok"
        except (TooFewPoints, DegenerateScatter) as e:
            trend = {"status": "undetermined", "reason": str(e), "sector": "NONE"}
        w.write("trend.json", _json(trend))

        w.stage = "summary"
        w.write("summary.json", _json(summary))
        w.status = "complete"
        w.stage = None
        w.flush()
    except AeromagError as e:
        w.error = f"{type(e).__name__}: {e}"
        w.flush()
        e.stage = w.stage
        e.args = (f"[{w.stage}] {e}",)
        raise
    return w.manifest()


def _classify_stage(config, sols, grads, w):
    c = config.classifier
    si_set = config.euler.si_set
    feats, labels = mlp.build_features(sols, grads[0], grads[1], si_set)
    if c.get("model_path"):
        model = mlp.MlpModel.from_json(config.resolve(c["model_path"]))
        result = {"mode": "predict"}
    else:
        tc = dict(c.get("training", {}))
        tc["seed"] = sub_seed(config.seed, "classifier")
        model, history = mlp.train_mlp(feats, labels, mlp.TrainingConfig(**tc), si_set)
        w.write("model.json", model.to_json() + "\n")
        w.write("training.json", _json(history.to_dict()))
        result = {"mode": "train", "validation_accuracy": _json_safe(history.validation_accuracy)}
    prob = mlp.predict(model, feats)
    pred = np.argmax(prob, axis=1)
    cm = mlp.confusion_matrix(labels, pred, len(si_set))
    w.write("confusion.csv", mlp.confusion_csv(cm, si_set))
    si_sorted = np.asarray(sorted(si_set))
    lines = ["index,si,predicted_si," + ",".join(f"p_{s:g}" for s in si_sorted)]
    for i in range(len(sols)):
        lines.append(f"{i},{sols.si[i]:.17g},{si_sorted[pred[i]]:.17g},"
                     + ",".join(format(v, ".17g") for v in prob[i]))
    w.write("predictions.csv", "\n".join(lines) + "\n")
    result["training_accuracy"] = float(np.mean(pred == labels))
    return result


# ---------------------------------------------------------------------------
# Synthetic demonstrations
# ---------------------------------------------------------------------------

PRESETS = ("one_source", "two_source", "noisy_survey")

# placeholder map frame (UTM-like metres); not a real survey location
_ORIGIN = (300000.0, 1100000.0)


def _frame(n, cell=DEFAULT_CELL_SIZE):
    return {"x_origin": _ORIGIN[0], "y_origin": _ORIGIN[1], "cell_size": cell, "n_cols": n, "n_rows": n}


def _center(n, row, col, cell=DEFAULT_CELL_SIZE):
    return _ORIGIN[0] + (col + 0.5) * cell, _ORIGIN[1] + (row + 0.5) * cell


def preset_config(preset, seed=0):
    """Ready-to-run config dict for a synthetic preset."""
    if preset == "one_source":
        n = 128
        x, y = _center(n, n // 2, n // 2)
        sources = [{"kind": "homogeneous", "x0": x, "y0": y, "z0": 200.0,
                    "amplitude": 1000.0 * 200.0**2, "si": 2.0}]
        inp = {"type": "synthetic", "georef": _frame(n), "sources": sources}
        extra = {"derivatives": "analytic", "cluster_radius": 300.0}
    elif preset == "two_source":
        n = 128
        x1, y1 = _center(n, n // 2, 34)
        x2, y2 = _center(n, n // 2, 94)
        sources = [
            {"kind": "homogeneous", "x0": x1, "y0": y1, "z0": 300.0, "amplitude": 1000.0 * 300.0, "si": 1.0},
            {"kind": "homogeneous", "x0": x2, "y0": y2, "z0": 800.0, "amplitude": 1000.0 * 800.0**3,
             "si": 3.0},
        ]
        inp = {"type": "synthetic", "georef": _frame(n), "sources": sources}
        extra = {"derivatives": "analytic", "cluster_radius": 300.0}
    elif preset == "noisy_survey":
        n = 256
        x, y = _center(n, n // 2, n // 2)
        # induced dipole; the ambient field direction is a placeholder, not survey metadata
        sources = [{"kind": "dipole", "x0": x, "y0": y, "z0": 1000.0, "moment": 1e10,
                    "inclination": 60.0, "declination": 5.0}]
        inp = {"type": "synthetic", "georef": _frame(n), "sources": sources,
               "field_inclination": 60.0, "field_declination": 5.0,
               "noise_relative_sigma": 0.01}
        extra = {"derivatives": "spectral", "cluster_radius": 500.0,
                 "filters": [{"op": "upward_continue", "height": 500.0}]}
    else:
        raise ConfigInvalid("preset", f"expected one of {PRESETS}, got {preset!r}")
    cx = _ORIGIN[0] + 0.5 * n * DEFAULT_CELL_SIZE
    cy = _ORIGIN[1] + 0.5 * n * DEFAULT_CELL_SIZE
    cfg = {
        "seed": int(seed),
        "input": inp,
        "euler": EulerConfig().to_dict(),
        "stats": {"pca": True, "csr": True, "nns": True, "descriptive": True, "area_m2": None},
        "classifier": {"enabled": False},
        "products": {
            "profiles": [
                {"axis": "east_west", "center": cy, "half_width": 5 * DEFAULT_CELL_SIZE, "label": "EW"},
                {"axis": "north_south", "center": cx, "half_width": 5 * DEFAULT_CELL_SIZE, "label": "NS"},
            ],
            "bin_width": DEFAULT_BIN_WIDTH,
            "anisotropy_threshold": DEFAULT_ANISOTROPY_THRESHOLD,
        },
    }
    cfg.update(extra)
    return cfg


def synth_demo(preset, out_dir, seed=0):
    """Write ``config.json`` and the synthetic input grid for ``preset``; returns the config dict."""
    cfg = preset_config(preset, seed)
    os.makedirs(out_dir, exist_ok=True)
    parsed = load_config(cfg, base_dir=out_dir)
    T, _, _ = synthesize(parsed)
    with open(os.path.join(out_dir, "synthetic_tmi.asc"), "w", encoding="utf-8", newline="\n") as f:
        f.write(grid_to_text(T))
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8", newline="\n") as f:
        f.write(_json(cfg))
    return cfg
