"""Descriptive statistics, nearest-neighbour statistics, CSR tests and PCA.

Row labels of :class:`DescriptiveStats` reproduce the nearest-neighbour
statistics table used in the survey report, so serialized reports can be
compared with it line by line.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, NonpositiveArea, TooFewPoints
from .geodata import nearest_neighbor_distances

NA = "N/A"
MEAN_DIFFERENCE_MAX_N = 10_000
PERCENTILES = (1, 5, 10, 25, 50, 75, 90, 95, 99)

# (label, attribute) in table order
TABLE_ROWS = tuple(
    [(f"{p}%-tile", f"p{p}") for p in PERCENTILES]
    + [
        ("Minimum", "minimum"),
        ("Maximum", "maximum"),
        ("Mean", "mean"),
        ("Median", "median"),
        ("Geometric Mean", "geometric_mean"),
        ("Harmonic Mean", "harmonic_mean"),
        ("Root Mean Square", "root_mean_square"),
        ("Trim Mean (10%)", "trim_mean"),
        ("Interquartile Mean", "interquartile_mean"),
        ("Midrange", "midrange"),
        ("Winsorized Mean", "winsorized_mean"),
        ("TriMean", "trimean"),
        ("Variance", "variance"),
        ("Standard Deviation", "std"),
        ("Interquartile Range", "iqr"),
        ("Range", "range"),
        ("Mean Difference", "mean_difference"),
        ("Median Abs. Deviation", "median_abs_deviation"),
        ("Average Abs. Deviation", "average_abs_deviation"),
        ("Quartile Dispersion", "quartile_dispersion"),
        ("Relative Mean Diff.", "relative_mean_difference"),
        ("Standard Error", "standard_error"),
        ("Coef. of Variation", "coef_of_variation"),
        ("Skewness", "skewness"),
        ("Kurtosis", "kurtosis"),
        ("Sum", "sum"),
        ("Sum Absolute", "sum_absolute"),
        ("Sum Squares", "sum_squares"),
        ("Mean Square", "mean_square"),
    ]
)


@dataclass
class DescriptiveStats:
    """One column of the statistics table; ``None`` marks a not-applicable row."""

    n: int
    p1: float
    p5: float
    p10: float
    p25: float
    p50: float
    p75: float
    p90: float
    p95: float
    p99: float
    minimum: float
    maximum: float
    mean: float
    median: float
    geometric_mean: float | None
    harmonic_mean: float | None
    root_mean_square: float
    trim_mean: float
    interquartile_mean: float
    midrange: float
    winsorized_mean: float
    trimean: float
    variance: float | None
    std: float | None
    iqr: float
    range: float
    mean_difference: float | None
    median_abs_deviation: float
    average_abs_deviation: float
    quartile_dispersion: float | None
    relative_mean_difference: float | None
    standard_error: float | None
    coef_of_variation: float | None
    skewness: float | None
    kurtosis: float | None
    sum: float
    sum_absolute: float
    sum_squares: float
    mean_square: float

    def rows(self):
        """Ordered ``(label, value)`` pairs with ``"N/A"`` for missing values."""
        out = []
        for label, attr in TABLE_ROWS:
            v = getattr(self, attr)
            out.append((label, NA if v is None else v))
        return out

    def to_json(self, **kwargs):
        return json.dumps(dict(self.rows()), **kwargs)


def _tail_count(n):
    return int(math.floor(0.05 * n))


def _mean_difference(sorted_x):
    """Gini mean difference sum_{i != j} |x_i - x_j| / (n (n - 1))."""
    n = sorted_x.size
    k = np.arange(n)
    return float(2.0 * np.sum((2 * k - n + 1) * sorted_x) / (n * (n - 1)))


def descriptive_stats(values):
    """Compute every row of the statistics table.

    Conventions: percentiles interpolate linearly between closest ranks;
    trimmed and winsorized means treat floor(0.05 n) values in each tail;
    the interquartile mean averages the sorted values left after dropping
    floor(n/4) from each end; trimean is (Q1 + 2 Q2 + Q3) / 4; variance uses
    n - 1, skewness and kurtosis use n-divisor central moments and kurtosis is
    not excess (3 for a normal sample).
    """
    x = np.asarray(values, dtype=float).reshape(-1)
    n = x.size
    if n == 0:
        raise EmptyInput("descriptive_stats needs at least one value")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    xs = np.sort(x)
    pct = np.percentile(xs, PERCENTILES)
    q1, q2, q3 = np.percentile(xs, [25, 50, 75])
    total = float(np.sum(xs))
    mean = total / n
    sumsq = float(np.sum(xs * xs))

    t = _tail_count(n)
    trimmed = xs[t:n - t] if t else xs
    wins = xs.copy()
    if t:
        wins[:t] = xs[t]
        wins[n - t:] = xs[n - t - 1]
    qcut = n // 4
    inner = xs[qcut:n - qcut] if qcut else xs

    positive = bool(xs[0] > 0)
    dev = xs - mean
    if n >= 2:
        variance = float(np.sum(dev * dev)) / (n - 1)
        std = math.sqrt(variance)
    else:
        variance = std = None
    m2 = float(np.mean(dev * dev))
    if n >= 2 and m2 > 0:
        skew = float(np.mean(dev**3)) / m2**1.5
        kurt = float(np.mean(dev**4)) / m2**2
    else:
        skew = kurt = None
    md = _mean_difference(xs) if 2 <= n <= MEAN_DIFFERENCE_MAX_N else None

    return DescriptiveStats(
        n=n,
        **{f"p{p}": float(v) for p, v in zip(PERCENTILES, pct)},
        minimum=float(xs[0]),
        maximum=float(xs[-1]),
        mean=mean,
        median=float(q2),
        geometric_mean=float(np.exp(np.mean(np.log(xs)))) if positive else None,
        harmonic_mean=float(n / np.sum(1.0 / xs)) if positive else None,
        root_mean_square=math.sqrt(sumsq / n),
        trim_mean=float(np.mean(trimmed)),
        interquartile_mean=float(np.mean(inner)),
        midrange=0.5 * float(xs[0] + xs[-1]),
        winsorized_mean=float(np.mean(wins)),
        trimean=float(q1 + 2 * q2 + q3) / 4.0,
        variance=variance,
        std=std,
        iqr=float(q3 - q1),
        range=float(xs[-1] - xs[0]),
        mean_difference=md,
        median_abs_deviation=float(np.median(np.abs(xs - q2))),
        average_abs_deviation=float(np.mean(np.abs(dev))),
        quartile_dispersion=float((q3 - q1) / (q3 + q1)) if (q3 + q1) != 0 else None,
        relative_mean_difference=(md / mean) if (md is not None and mean != 0) else None,
        standard_error=(std / math.sqrt(n)) if std is not None else None,
        coef_of_variation=(std / mean) if (std is not None and mean != 0) else None,
        skewness=skew,
        kurtosis=kurt,
        sum=total,
        sum_absolute=float(np.sum(np.abs(xs))),
        sum_squares=sumsq,
        mean_square=sumsq / n,
    )


@dataclass
class NnsReport:
    nn_distances: np.ndarray
    stats: DescriptiveStats

    def to_json(self, **kwargs):
        return json.dumps({"n_points": int(self.nn_distances.size), "stats": dict(self.stats.rows())}, **kwargs)

    def distances_csv(self):
        return "nn_distance\n" + "".join(f"{d:.17g}\n" for d in self.nn_distances)


def nearest_neighbor_stats(points):
    """Exact nearest-neighbour distances of an (n, 2) point array and their statistics."""
    xy = np.asarray(points, dtype=float).reshape(-1, 2)
    if xy.shape[0] < 2:
        raise TooFewPoints(f"need at least 2 points, got {xy.shape[0]}")
    d = nearest_neighbor_distances(xy)
    return NnsReport(d, descriptive_stats(d))


@dataclass
class CsrReport:
    lambda_intensity: float
    clark_evans: float
    skellam: float
    skellam_dof: int
    n_points: int
    area_m2: float
    skellam_p_value: float | None = None

    def rows(self):
        return [
            ("Lambda", self.lambda_intensity),
            ("Clark and Evans", self.clark_evans),
            ("Skellam", self.skellam),
        ]

    def to_json(self, **kwargs):
        payload = dict(self.rows())
        payload.update(
            skellam_dof=self.skellam_dof,
            skellam_p_value=self.skellam_p_value,
            n_points=self.n_points,
            area_m2=self.area_m2,
        )
        return json.dumps(payload, **kwargs)


def bounding_box_area(points):
    xy = np.asarray(points, dtype=float).reshape(-1, 2)
    return float(np.ptp(xy[:, 0]) * np.ptp(xy[:, 1]))


def csr_tests(points, area_m2=None):
    """Clark-Evans ratio and Skellam statistic, without edge correction.

    ``area_m2`` defaults to the bounding box of the points. The Skellam
    statistic is compared with chi-square on 2n degrees of freedom; the
    reported p-value is the upper tail (large values mean dispersion).
    """
    from scipy.stats import chi2

    xy = np.asarray(points, dtype=float).reshape(-1, 2)
    n = xy.shape[0]
    if n < 2:
        raise TooFewPoints(f"need at least 2 points, got {n}")
    if area_m2 is None:
        area_m2 = bounding_box_area(xy)
    if not area_m2 > 0:
        raise NonpositiveArea(f"area must be > 0, got {area_m2}")
    d = nearest_neighbor_distances(xy)
    lam = n / area_m2
    expected = 0.5 / math.sqrt(lam)
    r = float(np.mean(d)) / expected
    s = 2.0 * math.pi * lam * float(np.sum(d * d))
    return CsrReport(
        lambda_intensity=lam,
        clark_evans=r,
        skellam=s,
        skellam_dof=2 * n,
        n_points=n,
        area_m2=float(area_m2),
        skellam_p_value=float(chi2.sf(s, 2 * n)),
    )


@dataclass
class PcaResult:
    loadings: np.ndarray
    eigenvalues: np.ndarray
    means: np.ndarray
    n_samples: int
    degenerate: bool = False
    labels: tuple = field(default=())

    def to_json(self, **kwargs):
        d = self.loadings.shape[0]
        labels = list(self.labels) or [f"V{i + 1}" for i in range(d)]
        table = {
            lab: {f"PC{j + 1}": float(self.loadings[i, j]) for j in range(d)}
            for i, lab in enumerate(labels)
        }
        table["Lambda"] = {f"PC{j + 1}": float(self.eigenvalues[j]) for j in range(d)}
        return json.dumps(
            {"table": table, "means": self.means.tolist(), "n_samples": self.n_samples,
             "degenerate": self.degenerate},
            **kwargs,
        )

    def transform(self, data):
        return (np.asarray(data, dtype=float) - self.means) @ self.loadings


def pca(data, labels=()):
    """Principal components of an (n, d) matrix from the n-1 covariance.

    Eigenvalues are returned in descending order (tiny negatives clamped to
    zero); each loading column is signed so that its largest-magnitude entry
    is positive. All-identical rows give zero eigenvalues and
    ``degenerate=True`` rather than an exception.
    """
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < 2 or d < 1:
        raise TooFewPoints(f"pca needs n >= 2 and d >= 1, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("pca input must be finite")
    means = X.mean(axis=0)
    C = X - means
    cov = (C.T @ C) / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    evals = np.where((evals < 0) & (evals >= -1e-12 * max(1.0, float(np.trace(cov)))), 0.0, evals)
    evals = np.maximum(evals, 0.0)
    lead = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[lead, np.arange(d)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    degenerate = bool(np.all(cov == 0))
    return PcaResult(evecs, evals, means, n, degenerate, tuple(labels))
