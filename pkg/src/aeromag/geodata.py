"""Survey point ingestion, grid georeferencing, gridding and ESRI ASCII grid I/O.

Grids are stored bottom row first: ``values[0]`` is the southernmost row, so
row index ``i`` grows northward together with the y coordinate. The ESRI ASCII
format stores the northernmost row first; the flip happens only in
:func:`write_grid` and :func:`read_grid`.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DimensionMismatch,
    EmptyInput,
    HeaderMismatch,
    MalformedRow,
    NonFinite,
    SingularSystem,
    TooFewPoints,
)

log = logging.getLogger(__name__)

DEFAULT_CELL_SIZE = 100.0
NODATA_VALUE = -99999.0
KRIGING_NEIGHBORHOOD = 16


@dataclass(frozen=True)
class GridGeoref:
    """Regular grid registration.

    ``x_origin``/``y_origin`` are the lower-left *corner* of the lower-left
    cell; samples live at cell centers.
    """

    x_origin: float
    y_origin: float
    cell_size: float = DEFAULT_CELL_SIZE
    n_cols: int = 2
    n_rows: int = 2

    def __post_init__(self):
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        if self.n_cols < 2 or self.n_rows < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.n_rows}x{self.n_cols}")
        if not (math.isfinite(self.x_origin) and math.isfinite(self.y_origin)):
            raise ValueError("grid origin must be finite")

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    def x_centers(self):
        return self.x_origin + (np.arange(self.n_cols) + 0.5) * self.cell_size

    def y_centers(self):
        return self.y_origin + (np.arange(self.n_rows) + 0.5) * self.cell_size

    def cell_center(self, row, col):
        """Center of cell (row counted from the bottom, col from the west)."""
        return (
            self.x_origin + (col + 0.5) * self.cell_size,
            self.y_origin + (row + 0.5) * self.cell_size,
        )

    def mesh(self):
        """Return ``(X, Y)`` cell-center coordinate arrays of shape (n_rows, n_cols)."""
        return np.meshgrid(self.x_centers(), self.y_centers())

    def extent(self):
        return (
            self.x_origin,
            self.x_origin + self.n_cols * self.cell_size,
            self.y_origin,
            self.y_origin + self.n_rows * self.cell_size,
        )

    @property
    def area(self):
        return (self.n_cols * self.cell_size) * (self.n_rows * self.cell_size)

    def translated(self, dx, dy):
        return GridGeoref(self.x_origin + dx, self.y_origin + dy, self.cell_size, self.n_cols, self.n_rows)

    def to_dict(self):
        return {
            "x_origin": self.x_origin,
            "y_origin": self.y_origin,
            "cell_size": self.cell_size,
            "n_cols": self.n_cols,
            "n_rows": self.n_rows,
        }


@dataclass
class Grid:
    georef: GridGeoref
    values: np.ndarray
    nodata_mask: np.ndarray = None
    units_label: str = "nT"

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.values.shape != self.georef.shape:
            raise DimensionMismatch(
                f"values shape {self.values.shape} != georef shape {self.georef.shape}"
            )
        if self.nodata_mask is None:
            self.nodata_mask = ~np.isfinite(self.values)
        else:
            self.nodata_mask = np.array(self.nodata_mask, dtype=bool)
            if self.nodata_mask.shape != self.values.shape:
                raise DimensionMismatch("nodata_mask shape does not match values")
        if not np.all(np.isfinite(self.values[~self.nodata_mask])):
            raise NonFinite("grid", "unmasked values must be finite")
        self.values[self.nodata_mask] = np.nan

    @property
    def has_nodata(self):
        return bool(self.nodata_mask.any())

    def with_values(self, values, units_label=None):
        return Grid(self.georef, values, self.nodata_mask.copy(), units_label or self.units_label)


@dataclass(frozen=True)
class VariogramModel:
    kind: str = "spherical"
    nugget: float = 0.0
    sill: float = 1.0
    range_m: float = 1000.0

    KINDS = ("spherical", "exponential", "gaussian")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown variogram kind {self.kind!r}")
        if self.nugget < 0 or not self.sill > 0 or self.nugget > self.sill:
            raise ValueError("variogram requires 0 <= nugget <= sill and sill > 0")
        if not self.range_m > 0:
            raise ValueError("variogram range must be > 0")

    def gamma(self, h):
        """Semivariance; ``sill`` is the total sill, ``gamma(0) = 0``.

        Exponential and gaussian models use the practical-range convention
        (95% of the partial sill reached at ``range_m``).
        """
        h = np.asarray(h, dtype=float)
        r = h / self.range_m
        if self.kind == "spherical":
            shape = np.where(r < 1.0, 1.5 * r - 0.5 * r**3, 1.0)
        elif self.kind == "exponential":
            shape = 1.0 - np.exp(-3.0 * r)
        else:
            shape = 1.0 - np.exp(-3.0 * r * r)
        g = self.nugget + (self.sill - self.nugget) * shape
        return np.where(h > 0, g, 0.0)

    def covariance(self, h):
        return self.sill - self.gamma(h)


@dataclass
class SurveyPointSet:
    x: np.ndarray
    y: np.ndarray
    value: np.ndarray
    crs_label: str = ""
    duplicate_mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.value = np.asarray(self.value, dtype=float)
        if not (self.x.shape == self.y.shape == self.value.shape and self.x.ndim == 1):
            raise DimensionMismatch("x, y, value must be 1-D arrays of equal length")
        if self.x.size == 0:
            raise EmptyInput("point set is empty")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.value))):
            raise NonFinite("points", "coordinates and values must be finite")
        if self.duplicate_mask is None:
            self.duplicate_mask = _duplicate_mask(self.x, self.y)

    def __len__(self):
        return self.x.size

    @property
    def n_duplicates(self):
        return int(self.duplicate_mask.sum())

    @property
    def xy(self):
        return np.column_stack([self.x, self.y])


def _duplicate_mask(x, y):
    """True for every row whose (x, y) already appeared earlier."""
    seen = set()
    mask = np.zeros(x.size, dtype=bool)
    for i, key in enumerate(zip(x.tolist(), y.tolist())):
        if key in seen:
            mask[i] = True
        else:
            seen.add(key)
    return mask


# ---------------------------------------------------------------------------
# Points CSV
# ---------------------------------------------------------------------------

def _as_text_stream(source):
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline="")
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def load_points(source, format="csv", crs_label=""):
    """Load scattered ``x,y,tmi`` observations.

    ``source`` may be raw bytes, a binary or text stream, or a path. Rows are
    returned in input order; rows repeating an earlier coordinate pair are
    kept and flagged in ``duplicate_mask``.
    """
    if format != "csv":
        raise ValueError(f"unsupported points format {format!r}")
    stream = _as_text_stream(source)
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInput("no header row") from None
        names = [h.strip().lstrip("﻿").lower() for h in header]
        try:
            ix, iy, iv = names.index("x"), names.index("y"), names.index("tmi")
        except ValueError:
            raise MalformedRow(1, f"header must contain x, y, tmi columns, got {header}") from None
        xs, ys, vs = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                x, y, v = float(row[ix]), float(row[iy]), float(row[iv])
            except (ValueError, IndexError):
                raise MalformedRow(lineno, f"cannot parse {row!r}") from None
            if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(v)):
                raise NonFinite(lineno, f"non-finite field in {row!r}")
            xs.append(x)
            ys.append(y)
            vs.append(v)
    finally:
        if isinstance(source, (str, os.PathLike)):
            stream.close()
    if not xs:
        raise EmptyInput("no data rows")
    points = SurveyPointSet(np.array(xs), np.array(ys), np.array(vs), crs_label=crs_label)
    if points.n_duplicates:
        log.warning("%d duplicate-coordinate rows in point input", points.n_duplicates)
    return points


def write_points(points, sink):
    """Write points as ``x,y,tmi`` CSV with round-trip-exact floats."""
    lines = ["x,y,tmi"]
    for x, y, v in zip(points.x.tolist(), points.y.tolist(), points.value.tolist()):
        lines.append(f"{x!r},{y!r},{v!r}")
    text = "\n".join(lines) + "\n"
    _write_text(sink, text)


def _write_text(sink, text):
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    elif isinstance(sink, io.TextIOBase):
        sink.write(text)
    else:
        sink.write(text.encode("utf-8"))


def points_from_grid(grid):
    """Cell centers of the unmasked cells as a point set (row-major order)."""
    X, Y = grid.georef.mesh()
    keep = ~grid.nodata_mask
    return SurveyPointSet(X[keep], Y[keep], grid.values[keep])


# ---------------------------------------------------------------------------
# Nearest-neighbour machinery
# ---------------------------------------------------------------------------

def _euclid(dx, dy):
    return np.sqrt(dx * dx + dy * dy)


def nearest_neighbor_distances(xy, n_candidates=8):
    """Exact nearest-neighbour distance of every point to any *other* point.

    A KD-tree proposes candidates; distances are then re-evaluated with the
    same expression a brute-force scan would use, so the result is bit-equal
    to an O(n^2) search.
    """
    xy = np.asarray(xy, dtype=float)
    n = xy.shape[0]
    if n < 2:
        raise TooFewPoints(f"need at least 2 points, got {n}")
    k = min(n, n_candidates)
    _, idx = cKDTree(xy).query(xy, k=k)
    idx = np.asarray(idx).reshape(n, k)
    d = _euclid(xy[idx, 0] - xy[:, None, 0], xy[idx, 1] - xy[:, None, 1])
    d[idx == np.arange(n)[:, None]] = np.inf
    return d.min(axis=1)


@dataclass
class SpacingReport:
    min_spacing: float
    median_spacing: float
    max_spacing: float
    recommended_cell_size: float
    cell_size: float
    aliasing_warning: bool
    warning_kind: str | None

    def to_dict(self):
        return dict(self.__dict__)


def sample_spacing_report(points, cell_size=None):
    """Summarise nearest-neighbour sample spacing and check a grid cell size.

    The warning fires when the cell is smaller than half the median spacing
    (oversampled) or larger than the median spacing (undersampled).
    """
    xy = points.xy if isinstance(points, SurveyPointSet) else np.asarray(points, dtype=float)
    if xy.shape[0] < 2:
        raise TooFewPoints(f"need at least 2 points, got {xy.shape[0]}")
    d = nearest_neighbor_distances(xy)
    median = float(np.median(d))
    cell = DEFAULT_CELL_SIZE if cell_size is None else float(cell_size)
    kind = None
    if cell < 0.5 * median:
        kind = "oversampled"
    elif cell > median:
        kind = "undersampled"
    return SpacingReport(
        min_spacing=float(d.min()),
        median_spacing=median,
        max_spacing=float(d.max()),
        recommended_cell_size=median,
        cell_size=cell,
        aliasing_warning=kind is not None,
        warning_kind=kind,
    )


def grid_nearest(points, georef, max_radius, n_candidates=16):
    """Nearest-point gridding; cells with no point within ``max_radius`` are nodata.

    Ties go to the smallest point index.
    """
    if not max_radius > 0:
        raise ValueError("max_radius must be > 0")
    xy = points.xy
    n = xy.shape[0]
    X, Y = georef.mesh()
    centers = np.column_stack([X.ravel(), Y.ravel()])
    k = min(n, n_candidates)
    _, idx = cKDTree(xy).query(centers, k=k)
    idx = np.asarray(idx).reshape(-1, k)
    d = _euclid(xy[idx, 0] - centers[:, None, 0], xy[idx, 1] - centers[:, None, 1])
    # lexicographic (distance, index) minimum per row
    dmin = d.min(axis=1, keepdims=True)
    cand = np.where(d == dmin, idx, n)
    best = cand.min(axis=1)
    ok = dmin[:, 0] <= max_radius
    vals = np.full(centers.shape[0], np.nan)
    vals[ok] = points.value[best[ok]]
    mask = ~ok
    return Grid(georef, vals.reshape(georef.shape), mask.reshape(georef.shape))


# ---------------------------------------------------------------------------
# Ordinary kriging
# ---------------------------------------------------------------------------

def default_variogram(points):
    """Spherical, zero nugget, sill = sample variance, range = 10 x median spacing."""
    var = float(np.var(points.value, ddof=1)) if len(points) > 1 else 0.0
    if not var > 0:
        var = 1.0
    spacing = sample_spacing_report(points).median_spacing
    if not spacing > 0:
        spacing = DEFAULT_CELL_SIZE
    return VariogramModel("spherical", 0.0, var, 10.0 * spacing)


def kriging_matrix(xy, variogram):
    """Covariance-form ordinary kriging matrix with the Lagrange border."""
    m = xy.shape[0]
    diff = xy[:, None, :] - xy[None, :, :]
    h = np.sqrt((diff**2).sum(-1))
    K = np.ones((m + 1, m + 1))
    K[:m, :m] = variogram.covariance(h)
    K[m, m] = 0.0
    return K


def kriging_weights(xy, target, variogram):
    """Solve the ordinary kriging system for one target; return (weights, lagrange)."""
    xy = np.asarray(xy, dtype=float)
    m = xy.shape[0]
    K = kriging_matrix(xy, variogram)
    rhs = np.ones(m + 1)
    rhs[:m] = variogram.covariance(np.sqrt(((xy - np.asarray(target, float)) ** 2).sum(-1)))
    sol = np.linalg.solve(K, rhs)
    return sol[:m], sol[m]


@dataclass
class KrigingDiagnostics:
    singular_cells: list = field(default_factory=list)
    negative_weight_cells: int = 0


def grid_kriging(points, georef, variogram=None, neighborhood=KRIGING_NEIGHBORHOOD,
                 chunk=4096, return_diagnostics=False):
    """Ordinary kriging of ``points`` onto the cell centers of ``georef``.

    Each cell uses its ``neighborhood`` nearest distinct points; later rows
    duplicating an earlier coordinate are dropped. Cells whose system is
    singular are masked and reported instead of raising.
    """
    if neighborhood < 2:
        raise ValueError("neighborhood must be >= 2")
    keep = ~points.duplicate_mask
    xy = points.xy[keep]
    z = points.value[keep]
    if xy.shape[0] < 2:
        raise TooFewPoints("kriging needs at least 2 distinct points")
    if variogram is None:
        variogram = default_variogram(points)
    m = min(neighborhood, xy.shape[0])
    X, Y = georef.mesh()
    centers = np.column_stack([X.ravel(), Y.ravel()])
    _, nbr = cKDTree(xy).query(centers, k=m)
    nbr = np.asarray(nbr).reshape(-1, m)

    diag = KrigingDiagnostics()
    out = np.full(centers.shape[0], np.nan)
    for start in range(0, centers.shape[0], chunk):
        sl = slice(start, start + chunk)
        idx = nbr[sl]
        P = xy[idx]                                   # (c, m, 2)
        dd = P[:, :, None, :] - P[:, None, :, :]
        K = np.ones((idx.shape[0], m + 1, m + 1))
        K[:, :m, :m] = variogram.covariance(np.sqrt((dd**2).sum(-1)))
        K[:, m, m] = 0.0
        rhs = np.ones((idx.shape[0], m + 1))
        rhs[:, :m] = variogram.covariance(np.sqrt(((P - centers[sl, None, :]) ** 2).sum(-1)))
        try:
            sol = np.linalg.solve(K, rhs[..., None])[..., 0]
            bad = ~np.all(np.isfinite(sol), axis=1)
        except np.linalg.LinAlgError:
            sol = np.full_like(rhs, np.nan)
            bad = np.zeros(idx.shape[0], dtype=bool)
            for c in range(idx.shape[0]):
                try:
                    sol[c] = np.linalg.solve(K[c], rhs[c])
                except np.linalg.LinAlgError:
                    bad[c] = True
        w = sol[:, :m]
        pred = (w * z[idx]).sum(axis=1)
        pred[bad] = np.nan
        out[sl] = pred
        diag.negative_weight_cells += int(np.any(w[~bad] < 0, axis=1).sum())
        for c in np.flatnonzero(bad):
            cell = int(start + c)
            diag.singular_cells.append(divmod(cell, georef.n_cols))
    for cell in diag.singular_cells:
        log.warning("%s", SingularSystem(cell))
    grid = Grid(georef, out.reshape(georef.shape), ~np.isfinite(out).reshape(georef.shape))
    if return_diagnostics:
        return grid, diag
    return grid


# ---------------------------------------------------------------------------
# ESRI ASCII grid
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def _g17(v):
    return format(float(v), ".17g")


def grid_to_text(grid):
    g = grid.georef
    lines = [
        f"ncols {g.n_cols}",
        f"nrows {g.n_rows}",
        f"xllcorner {_g17(g.x_origin)}",
        f"yllcorner {_g17(g.y_origin)}",
        f"cellsize {_g17(g.cell_size)}",
        f"NODATA_value {NODATA_VALUE:g}",
    ]
    vals = np.where(grid.nodata_mask, NODATA_VALUE, grid.values)
    for row in vals[::-1]:
        lines.append(" ".join(_g17(v) for v in row))
    return "\n".join(lines) + "\n"


def write_grid(grid, sink):
    """Write ``grid`` as ESRI ASCII; north row first, 17 significant digits."""
    _write_text(sink, grid_to_text(grid))


def read_grid(source, units_label=""):
    """Read an ESRI ASCII grid written by :func:`write_grid` (or any compliant writer)."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as f:
            text = f.read()
    elif isinstance(source, (bytes, bytearray)):
        text = bytes(source).decode("utf-8")
    else:
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")
    lines = text.splitlines()
    header = {}
    pos = 0
    while pos < len(lines) and len(header) < len(_HEADER_KEYS):
        parts = lines[pos].split()
        if not parts:
            pos += 1
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS or len(parts) != 2 or key in header:
            break
        header[key] = parts[1]
        pos += 1
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise HeaderMismatch(f"missing or malformed header keys: {missing}")
    try:
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        xll, yll = float(header["xllcorner"]), float(header["yllcorner"])
        cell, nodata = float(header["cellsize"]), float(header["nodata_value"])
    except ValueError as exc:
        raise HeaderMismatch(str(exc)) from None
    rows = [ln.split() for ln in lines[pos:] if ln.strip()]
    if len(rows) != nrows or any(len(r) != ncols for r in rows):
        raise DimensionMismatch(
            f"expected {nrows} rows of {ncols} values, got {len(rows)} rows"
        )
    try:
        vals = np.array([[float(v) for v in r] for r in rows])[::-1]
    except ValueError as exc:
        raise HeaderMismatch(f"non-numeric sample: {exc}") from None
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals[::-1]))[0]
        raise NonFinite(int(pos + bad[0] + 1), "non-finite grid sample")
    mask = vals == nodata
    vals = vals.copy()
    vals[mask] = np.nan
    try:
        georef = GridGeoref(xll, yll, cell, ncols, nrows)
    except ValueError as exc:
        raise HeaderMismatch(str(exc)) from None
    return Grid(georef, vals, mask, units_label)


def fill_nearest(grid):
    """Fill nodata cells from the nearest valid cell (ties: lowest row-major index)."""
    if not grid.has_nodata:
        return grid
    valid = ~grid.nodata_mask
    if not valid.any():
        raise EmptyInput("grid has no valid cells to fill from")
    X, Y = grid.georef.mesh()
    pts = SurveyPointSet(X[valid], Y[valid], grid.values[valid])
    filled = grid_nearest(pts, grid.georef, max_radius=np.inf)
    return Grid(grid.georef, filled.values, None, grid.units_label)
