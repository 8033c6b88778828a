"""Plot-ready products derived from a solution set: profile sections, depth
histograms and a structural-trend summary."""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateScatter, EmptySolutionSet, TooFewPoints
from .spatialstats import pca

DEFAULT_BIN_WIDTH = 50.0
DEFAULT_ANISOTROPY_THRESHOLD = 1.5
# horizontal spread (m) below which positions are treated as coincident
MIN_SPREAD = 1e-6
PROFILE_COLUMNS = ("along", "z0", "si", "rms", "x0", "y0")

# 16-point rose folded onto 8 reciprocal pairs, starting at north
SECTOR_LABELS = ("N-S", "NNE-SSW", "NE-SW", "ENE-WSW", "E-W", "ESE-WNW", "SE-NW", "SSE-NNW")


@dataclass(frozen=True)
class ProfileSpec:
    axis: str                      # "east_west" or "north_south"
    center: float                  # northing for east_west, easting for north_south
    half_width: float
    label: str = ""

    def __post_init__(self):
        if self.axis not in ("east_west", "north_south"):
            raise ValueError("axis must be 'east_west' or 'north_south'")
        if not self.half_width > 0:
            raise ValueError("half_width must be > 0")


@dataclass
class ProfileSection:
    spec: ProfileSpec
    records: np.ndarray            # (n, 6) columns PROFILE_COLUMNS
    index: np.ndarray              # rows of the source solution set

    @property
    def record_matrix_shape(self):
        return self.records.shape

    def __len__(self):
        return self.records.shape[0]

    def to_csv(self):
        buf = io.StringIO()
        buf.write(",".join(PROFILE_COLUMNS) + "\n")
        for row in self.records:
            buf.write(",".join(format(v, ".17g") for v in row) + "\n")
        return buf.getvalue()


def corridor_mask(solutions, spec):
    cross = solutions.y0 if spec.axis == "east_west" else solutions.x0
    return np.abs(cross - spec.center) <= spec.half_width


def extract_profile(solutions, spec):
    """Solutions within ``half_width`` of the profile line, sorted along it (ties by depth)."""
    idx = np.flatnonzero(corridor_mask(solutions, spec))
    along = (solutions.x0 if spec.axis == "east_west" else solutions.y0)[idx]
    order = np.lexsort((solutions.z0[idx], along))
    idx = idx[order]
    along = along[order]
    records = np.column_stack([
        along, solutions.z0[idx], solutions.si[idx], solutions.rms[idx],
        solutions.x0[idx], solutions.y0[idx],
    ]).reshape(-1, len(PROFILE_COLUMNS))
    return ProfileSection(spec, records, idx)


@dataclass
class DepthHistogram:
    bin_width: float
    bin_edges: np.ndarray
    counts: np.ndarray
    total: int
    depths: np.ndarray             # sorted

    def cumulative_fraction(self, depth):
        """Fraction of solutions with z0 <= depth."""
        return int(np.searchsorted(self.depths, depth, side="right")) / self.total

    def to_csv(self):
        buf = io.StringIO()
        buf.write("bin_low,bin_high,count\n")
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            buf.write(f"{lo:.17g},{hi:.17g},{int(c)}\n")
        return buf.getvalue()


def depth_histogram(solutions, bin_width=DEFAULT_BIN_WIDTH):
    """Counts in bins [k w, (k + 1) w) from 0 up to the bin holding the deepest solution."""
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    z = np.sort(np.asarray(solutions.z0, dtype=float))
    if z.size == 0:
        raise EmptySolutionSet("no solutions to histogram")
    if z[0] < 0:
        raise ValueError("depths must be >= 0")
    nbins = int(math.floor(z[-1] / bin_width)) + 1
    edges = np.arange(nbins + 1) * float(bin_width)
    k = np.minimum(np.floor(z / bin_width).astype(int), nbins - 1)
    counts = np.bincount(k, minlength=nbins)
    return DepthHistogram(float(bin_width), edges, counts, int(z.size), z)


@dataclass
class TrendReport:
    principal_azimuth: float       # degrees clockwise from north, [0, 180)
    anisotropy_ratio: float
    sector_label: str
    eigenvalues: tuple
    n_points: int

    def to_json(self, **kwargs):
        return json.dumps({
            "principal_azimuth": self.principal_azimuth,
            "anisotropy_ratio": self.anisotropy_ratio,
            "sector": self.sector_label,
            "eigenvalues": list(self.eigenvalues),
            "n_points": self.n_points,
        }, **kwargs)


def azimuth_sector(azimuth):
    """Nearest reciprocal compass pair for an axial azimuth in degrees."""
    return SECTOR_LABELS[int(math.floor((azimuth % 180.0 + 11.25) / 22.5)) % 8]


def trend_analysis(solutions, anisotropy_threshold=DEFAULT_ANISOTROPY_THRESHOLD):
    """Principal axis of the horizontal solution scatter.

    The anisotropy ratio is lambda1 / lambda2 of the positional covariance
    (infinite for collinear points). Below the threshold the scatter is
    treated as isotropic and labelled "NONE".
    """
    x = np.asarray(solutions.x0, dtype=float)
    y = np.asarray(solutions.y0, dtype=float)
    if x.size < 3:
        raise TooFewPoints(f"trend analysis needs at least 3 points, got {x.size}")
    res = pca(np.column_stack([x, y]))
    l1, l2 = (float(v) for v in res.eigenvalues)
    if not math.sqrt(max(l1, 0.0)) > MIN_SPREAD:
        raise DegenerateScatter("all solutions share one horizontal position")
    ex, ey = res.loadings[:, 0]
    az = math.degrees(math.atan2(ex, ey)) % 180.0
    if az >= 180.0:
        az = 0.0
    ratio = math.inf if l2 <= 0 else l1 / l2
    label = azimuth_sector(az) if ratio >= anisotropy_threshold else "NONE"
    return TrendReport(az, ratio, label, (l1, l2), int(x.size))
