"""Moving-window Euler deconvolution over a discrete structural-index set.

Each window solves, in least squares, the homogeneity relation rearranged to

    x0*Tx + y0*Ty + z0*Tz + N*B = x*Tx + y*Ty + z*Tz + N*T

for the source position (x0, y0, z0) and base level B, with z positive down.
Horizontal coordinates are taken relative to the window centre so results do
not depend on the grid origin, and the design matrix is column-equilibrated
before a per-window SVD. After equilibration the matrix is the same for every
structural index, so one decomposition serves the whole index set.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateWindow, EmptySweep, GeorefMismatch

log = logging.getLogger(__name__)

DEFAULT_SI_SET = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
DEFAULT_RMS_ACCEPT = 8.9e-3
DEFAULT_WINDOW = 3

COND_LIMIT = 1e12
RMS_FLOOR = 1e-12
CHUNK = 4096

REJECT_REASONS = ("degenerate", "rms", "depth_range", "uncertainty")
SOLUTION_FIELDS = ("x0", "y0", "z0", "si", "base", "rms", "sigma_z", "window_row", "window_col")


@dataclass(frozen=True)
class EulerConfig:
    window_size: int = DEFAULT_WINDOW
    si_set: tuple = DEFAULT_SI_SET
    rms_accept: float = DEFAULT_RMS_ACCEPT
    max_depth: float = 1500.0
    depth_uncertainty_max: float = 0.15
    window_step: int = 1

    def __post_init__(self):
        object.__setattr__(self, "si_set", tuple(sorted(float(s) for s in set(self.si_set))))
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError("window_size must be odd and >= 3")
        if not self.si_set or min(self.si_set) <= 0:
            raise ValueError("si_set must be non-empty with positive entries")
        if not self.rms_accept > 0:
            raise ValueError("rms_accept must be > 0")
        if not self.max_depth > 0:
            raise ValueError("max_depth must be > 0")
        if not self.depth_uncertainty_max > 0:
            raise ValueError("depth_uncertainty_max must be > 0")
        if self.window_step < 1:
            raise ValueError("window_step must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["si_set"] = list(self.si_set)
        return d


@dataclass(frozen=True)
class EulerSolution:
    x0: float
    y0: float
    z0: float
    si: float
    base: float
    rms: float
    sigma_z: float
    window_row: int
    window_col: int


@dataclass
class SolutionSet:
    """Column-oriented collection of Euler solutions."""

    x0: np.ndarray
    y0: np.ndarray
    z0: np.ndarray
    si: np.ndarray
    base: np.ndarray
    rms: np.ndarray
    sigma_z: np.ndarray
    window_row: np.ndarray
    window_col: np.ndarray
    provenance: dict = field(default_factory=dict)
    rejected_counts: dict = field(default_factory=dict)
    cluster_sizes: np.ndarray | None = None

    def __post_init__(self):
        for name in SOLUTION_FIELDS:
            dtype = int if name in ("window_row", "window_col") else float
            setattr(self, name, np.asarray(getattr(self, name), dtype=dtype).reshape(-1))
        n = self.x0.size
        if any(getattr(self, f).size != n for f in SOLUTION_FIELDS):
            raise ValueError("solution columns differ in length")

    def __len__(self):
        return self.x0.size

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        return EulerSolution(*(getattr(self, f)[i].item() for f in SOLUTION_FIELDS))

    @classmethod
    def empty(cls, provenance=None, rejected_counts=None):
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, z, z, z, provenance or {}, rejected_counts or {})

    @classmethod
    def from_solutions(cls, solutions, provenance=None, rejected_counts=None):
        solutions = list(solutions)
        if not solutions:
            return cls.empty(provenance, rejected_counts)
        cols = {f: [getattr(s, f) for s in solutions] for f in SOLUTION_FIELDS}
        return cls(**cols, provenance=provenance or {}, rejected_counts=rejected_counts or {})

    def subset(self, index):
        cols = {f: getattr(self, f)[index] for f in SOLUTION_FIELDS}
        sizes = None if self.cluster_sizes is None else self.cluster_sizes[index]
        return SolutionSet(**cols, provenance=dict(self.provenance),
                           rejected_counts=dict(self.rejected_counts), cluster_sizes=sizes)

    def to_csv(self, sink=None):
        buf = io.StringIO()
        buf.write(",".join(SOLUTION_FIELDS) + "\n")
        for i in range(len(self)):
            row = [format(getattr(self, f)[i], ".17g") for f in SOLUTION_FIELDS[:7]]
            row += [str(int(self.window_row[i])), str(int(self.window_col[i]))]
            buf.write(",".join(row) + "\n")
        text = buf.getvalue()
        if sink is None:
            return text
        if isinstance(sink, (str, os.PathLike)):
            with open(sink, "w", encoding="utf-8", newline="\n") as f:
                f.write(text)
        else:
            sink.write(text)
        return text

    @classmethod
    def from_csv(cls, source, provenance=None):
        if isinstance(source, (str, os.PathLike)):
            with open(source, encoding="utf-8", newline="") as f:
                rows = list(csv.DictReader(f))
        else:
            rows = list(csv.DictReader(io.StringIO(source) if isinstance(source, str) else source))
        if not rows:
            return cls.empty(provenance)
        cols = {f: [float(r[f]) for r in rows] for f in SOLUTION_FIELDS}
        return cls(**cols, provenance=provenance or {})

    def provenance_json(self):
        return json.dumps(
            {"provenance": self.provenance, "rejected_counts": self.rejected_counts, "n_solutions": len(self)},
            indent=2, sort_keys=True,
        )


@dataclass
class WindowFit:
    x0: float
    y0: float
    z0: float
    base: float
    rms: float
    sigma_z: float


# ---------------------------------------------------------------------------
# Solver core
# ---------------------------------------------------------------------------

def _decompose(Tx, Ty, Tz):
    """Equilibrated SVD shared by every structural index.

    Inputs have shape (nw, m). Returns column scales, U, s, Vt and a
    degeneracy flag per window.
    """
    nw, m = Tx.shape
    A = np.stack([Tx, Ty, Tz, np.ones_like(Tx)], axis=-1)
    scale = np.sqrt((A * A).sum(axis=1))                   # (nw, 4)
    degenerate = ~np.all(scale > 0, axis=1)
    safe = np.where(scale > 0, scale, 1.0)
    U, s, Vt = np.linalg.svd(A / safe[:, None, :], full_matrices=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = (s[:, 0] / s[:, -1]) ** 2
    degenerate |= ~(cond <= COND_LIMIT)
    return safe, U, s, Vt, degenerate


def _solve_index(T, Tx, Ty, Tz, dx, dy, obs_z, si, decomp):
    """Solve every window for one structural index; returns a dict of (nw,) arrays."""
    scale, U, s, Vt, degenerate = decomp
    m = T.shape[1]
    rhs = dx * Tx + dy * Ty + obs_z * Tz + si * T
    s_safe = np.where(s > 0, s, np.inf)
    utb = np.einsum("wmk,wm->wk", U, rhs)
    xs = np.einsum("wkj,wk->wj", Vt, utb / s_safe)         # equilibrated unknowns
    resid = rhs - np.einsum("wmk,wk->wm", U, utb)
    rnorm = np.sqrt((resid * resid).sum(axis=1))
    bnorm = np.sqrt((rhs * rhs).sum(axis=1))
    # fourth column is the all-ones column, so its coefficient is N*B
    coef = xs / scale
    dof = max(m - 4, 1)
    var = rnorm**2 / dof
    inv_zz = ((Vt[:, :, 2] / s_safe) ** 2).sum(axis=1) / scale[:, 2] ** 2
    return {
        "dx0": coef[:, 0],
        "dy0": coef[:, 1],
        "z0": coef[:, 2],
        "base": coef[:, 3] / si,
        "rms": rnorm / np.maximum(bnorm, RMS_FLOOR),
        "sigma_z": np.sqrt(var * inv_zz),
        "degenerate": degenerate,
    }


def solve_window(T, Tx, Ty, Tz, coords, si, obs_z=0.0):
    """Euler solution for a single window.

    ``coords`` is ``(X, Y)`` of the window cell centres (same shape as T).
    Raises :class:`DegenerateWindow` when the equilibrated normal matrix has
    condition number above 1e12 (e.g. zero gradients).
    """
    T, Tx, Ty, Tz = (np.asarray(a, dtype=float).reshape(1, -1) for a in (T, Tx, Ty, Tz))
    X, Y = (np.asarray(a, dtype=float).reshape(-1) for a in coords)
    if T.shape[1] < 4:
        raise ValueError("window needs at least 4 cells")
    xc, yc = X.mean(), Y.mean()
    dx, dy = (X - xc)[None, :], (Y - yc)[None, :]
    decomp = _decompose(Tx, Ty, Tz)
    if decomp[4][0]:
        raise DegenerateWindow("window normal matrix is singular or ill-conditioned")
    r = _solve_index(T, Tx, Ty, Tz, dx, dy, obs_z, float(si), decomp)
    return WindowFit(
        x0=float(xc + r["dx0"][0]),
        y0=float(yc + r["dy0"][0]),
        z0=float(r["z0"][0]),
        base=float(r["base"][0]),
        rms=float(r["rms"][0]),
        sigma_z=float(r["sigma_z"][0]),
    )


def _sweep_chunk(args):
    Tw, Txw, Tyw, Tzw, dx, dy, obs_z, si_set = args
    decomp = _decompose(Txw, Tyw, Tzw)
    best = None
    for si in si_set:
        r = _solve_index(Tw, Txw, Tyw, Tzw, dx, dy, obs_z, si, decomp)
        r["si"] = np.full(Tw.shape[0], si)
        if best is None:
            best = r
            continue
        # strict improvement only: ties keep the smaller index already held
        better = r["rms"] < best["rms"]
        for key in best:
            best[key] = np.where(better, r[key], best[key])
    return best


def euler_sweep(T, Tx, Ty, Tz, config=None, threads=1, obs_z=0.0, grid_ids=None):
    """Slide a window over the grids and keep the best-fitting index per window.

    A window is accepted when its minimum-rms candidate has
    ``rms <= rms_accept``, ``0 < z0 <= max_depth`` and
    ``sigma_z / z0 <= depth_uncertainty_max``. ``obs_z`` is the depth of the
    observation surface (negative above the datum, e.g. after upward
    continuation). Output order and ``rejected_counts`` do not depend on
    ``threads``.
    """
    config = config or EulerConfig()
    georef = T.georef
    for g in (Tx, Ty, Tz):
        if g.georef != georef:
            raise GeorefMismatch("T, Tx, Ty, Tz must share one georef")
    w, step = config.window_size, config.window_step
    h = w // 2
    nr, nc = georef.shape
    if nr < w or nc < w:
        raise EmptySweep(f"{w}x{w} window does not fit a {nr}x{nc} grid")
    rows = np.arange(h, nr - h, step)
    cols = np.arange(h, nc - h, step)

    def windows(grid):
        v = np.where(grid.nodata_mask, np.nan, grid.values)
        sw = sliding_window_view(v, (w, w))[::step, ::step]
        return sw.reshape(-1, w * w)

    Tw, Txw, Tyw, Tzw = (windows(g) for g in (T, Tx, Ty, Tz))
    masked = ~(np.isfinite(Tw) & np.isfinite(Txw) & np.isfinite(Tyw) & np.isfinite(Tzw)).all(axis=1)
    Tw, Txw, Tyw, Tzw = (np.where(masked[:, None], 0.0, a) for a in (Tw, Txw, Tyw, Tzw))
    off = (np.arange(w) - h) * georef.cell_size
    dy, dx = np.meshgrid(off, off, indexing="ij")
    dx, dy = dx.reshape(1, -1), dy.reshape(1, -1)

    nwin = Tw.shape[0]
    chunks = [
        (Tw[a:a + CHUNK], Txw[a:a + CHUNK], Tyw[a:a + CHUNK], Tzw[a:a + CHUNK], dx, dy, obs_z, config.si_set)
        for a in range(0, nwin, CHUNK)
    ]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_sweep_chunk, chunks))
    else:
        parts = [_sweep_chunk(c) for c in chunks]
    best = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}

    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.reshape(-1), cc.reshape(-1)
    xc = georef.x_origin + (cc + 0.5) * georef.cell_size
    yc = georef.y_origin + (rr + 0.5) * georef.cell_size

    degenerate = best["degenerate"] | masked
    z0 = best["z0"]
    rms = best["rms"]
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_sigma = best["sigma_z"] / z0
    reason = np.full(nwin, "", dtype=object)
    reason[degenerate] = "degenerate"
    todo = reason == ""
    bad = todo & ~(rms <= config.rms_accept)
    reason[bad] = "rms"
    todo &= ~bad
    bad = todo & ~((z0 > 0) & (z0 <= config.max_depth))
    reason[bad] = "depth_range"
    todo &= ~bad
    bad = todo & ~(rel_sigma <= config.depth_uncertainty_max)
    reason[bad] = "uncertainty"
    todo &= ~bad
    accepted = todo

    rejected = {r: int((reason == r).sum()) for r in REJECT_REASONS}
    provenance = {
        "config": config.to_dict(),
        "georef": georef.to_dict(),
        "obs_z": obs_z,
        "n_windows": int(nwin),
        "grids": grid_ids or {},
    }
    idx = np.flatnonzero(accepted)
    result = SolutionSet(
        x0=xc[idx] + best["dx0"][idx],
        y0=yc[idx] + best["dy0"][idx],
        z0=z0[idx],
        si=best["si"][idx],
        base=best["base"][idx],
        rms=rms[idx],
        sigma_z=best["sigma_z"][idx],
        window_row=rr[idx],
        window_col=cc[idx],
        provenance=provenance,
        rejected_counts=rejected,
    )
    log.info("euler sweep: %d windows, %d accepted, rejected %s", nwin, len(result), rejected)
    return result


def filter_cluster(solutions, radius, return_labels=False):
    """Greedy de-duplication of overlapping-window solutions.

    Solutions are visited in order; each joins the first cluster whose current
    representative is within ``radius`` horizontally and within ``radius`` in
    depth, otherwise it starts a new cluster. A cluster is represented by its
    minimum-rms member (earliest on ties). Representatives are returned in
    cluster creation order with ``cluster_sizes`` filled in.
    """
    if not radius > 0:
        raise ValueError("radius must be > 0")
    n = len(solutions)
    labels = np.empty(n, dtype=int)
    rep = []                       # index into solutions of each cluster representative
    rx, ry, rz, rrms = [], [], [], []
    sizes = []
    for i in range(n):
        x, y, z, e = solutions.x0[i], solutions.y0[i], solutions.z0[i], solutions.rms[i]
        k = -1
        if rep:
            ax, ay, az = np.asarray(rx), np.asarray(ry), np.asarray(rz)
            near = (np.sqrt((ax - x) ** 2 + (ay - y) ** 2) <= radius) & (np.abs(az - z) <= radius)
            hit = np.flatnonzero(near)
            if hit.size:
                k = int(hit[0])
        if k < 0:
            rep.append(i)
            rx.append(x)
            ry.append(y)
            rz.append(z)
            rrms.append(e)
            sizes.append(1)
            labels[i] = len(rep) - 1
            continue
        labels[i] = k
        sizes[k] += 1
        if e < rrms[k]:
            rep[k] = i
            rx[k], ry[k], rz[k], rrms[k] = x, y, z, e
    out = solutions.subset(np.asarray(rep, dtype=int))
    out.cluster_sizes = np.asarray(sizes, dtype=int)
    out.provenance = dict(solutions.provenance, cluster_radius=radius)
    if return_labels:
        return out, labels
    return out


def modal_si(si_values, si_set=DEFAULT_SI_SET):
    """Most frequent index (smallest wins ties)."""
    si_values = np.asarray(si_values, dtype=float)
    if si_values.size == 0:
        return None
    counts = [(int(np.sum(si_values == s)), -s) for s in si_set]
    return -max(counts)[1]
