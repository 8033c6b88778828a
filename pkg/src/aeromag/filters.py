"""Grid enhancement filters and potential-field derivatives.

Spectral operators work on the even (mirror) extension of the grid: each axis
is reflected about its edge so the padded array is periodic with period twice
the grid length and has no jump at the wrap. A radially symmetric multiplier
keeps that symmetry, so the cropped output is again a valid even extension and
successive operators compose exactly (two continuations by h equal one by 2h
to rounding error).

Derivatives additionally remove a least-squares plane fitted to the boundary
ring before extension and add its analytic derivative back afterwards. A
mirrored plane has kinks at the edges, which would otherwise ring through the
derivative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import CutoffBelowNyquist, MaskedInput, RankDeficient
from .geodata import Grid, fill_nearest


@dataclass(frozen=True)
class SpectralPlan:
    """Padding plan.

    Each axis of length n is mirror-extended to the smallest multiple of 2n
    that is at least ``pad_factor * n``. ``taper`` > 0 additionally rolls the
    mirrored copies off to zero (cosine) over that fraction of the padded
    length, centred on the point farthest from the data.
    """

    pad_factor: float = 2.0
    taper: float = 0.0

    def __post_init__(self):
        if self.pad_factor < 1:
            raise ValueError("pad_factor must be >= 1")
        if not 0 <= self.taper <= 0.5:
            raise ValueError("taper must lie in [0, 0.5]")

    def padded_length(self, n):
        return 2 * n * max(1, math.ceil(self.pad_factor / 2.0))


DEFAULT_PLAN = SpectralPlan()


def _require_unmasked(grid):
    if grid.has_nodata:
        raise MaskedInput(
            f"{int(grid.nodata_mask.sum())} nodata cells; fill the grid before spectral filtering"
        )


def _boundary_plane(values):
    """Plane a + b*col + c*row fitted to the outer ring of cells."""
    nr, nc = values.shape
    ring = np.zeros((nr, nc), dtype=bool)
    ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
    rows, cols = np.nonzero(ring)
    A = np.column_stack([np.ones(rows.size), cols - (nc - 1) / 2.0, rows - (nr - 1) / 2.0])
    coef, *_ = np.linalg.lstsq(A, values[ring], rcond=None)
    cc, rr = np.meshgrid(np.arange(nc) - (nc - 1) / 2.0, np.arange(nr) - (nr - 1) / 2.0)
    plane = coef[0] + coef[1] * cc + coef[2] * rr
    return plane, coef[1], coef[2]


def _taper_weights(n, length, fraction):
    """1 on the data, cosine roll-off to 0 over ``fraction * length`` cells
    centred on the padded cell farthest (cyclically) from the data."""
    pos = np.arange(length)
    dist = np.where(pos < n, 0, np.minimum(pos - (n - 1), length - pos))
    width = fraction * length
    start = dist.max() - width / 2.0
    t = np.clip((dist - start) / max(width / 2.0, 1e-12), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def _extend(values, plan):
    nr, nc = values.shape
    Lr, Lc = plan.padded_length(nr), plan.padded_length(nc)
    ext = np.pad(values, ((0, Lr - nr), (0, Lc - nc)), mode="symmetric")
    if plan.taper > 0:
        ext = ext * np.outer(_taper_weights(nr, Lr, plan.taper), _taper_weights(nc, Lc, plan.taper))
    return ext


def _spectral(values, cell, multiplier, plan):
    nr, nc = values.shape
    ext = _extend(values, plan)
    Lr, Lc = ext.shape
    ky = 2.0 * np.pi * np.fft.fftfreq(Lr, cell)[:, None]
    kx = 2.0 * np.pi * np.fft.rfftfreq(Lc, cell)[None, :]
    k = np.sqrt(kx * kx + ky * ky)
    spec = np.fft.rfft2(ext) * multiplier(kx, ky, k)
    return np.fft.irfft2(spec, s=(Lr, Lc))[:nr, :nc]


def upward_continue(grid, height, plan=DEFAULT_PLAN):
    """Continue the field upward by ``height`` metres (multiplier exp(-|k| h))."""
    if not height > 0:
        raise ValueError("continuation height must be > 0")
    _require_unmasked(grid)
    out = _spectral(grid.values, grid.georef.cell_size, lambda kx, ky, k: np.exp(-k * height), plan)
    return grid.with_values(out)


def _odd_multiplier(kk):
    # padded lengths are always even, so the largest |k| is the Nyquist term
    return np.where(np.isclose(np.abs(kk), np.abs(kk).max()), 0.0, 1j * kk)


def derivative(grid, axis, plan=DEFAULT_PLAN):
    """First derivative along ``x`` (east), ``y`` (north) or ``z`` (down), in units/m.

    Horizontal derivatives multiply by i*k (Nyquist term zeroed), the vertical
    one by |k|.
    """
    _require_unmasked(grid)
    if axis == "x":
        mult = lambda kx, ky, k: _odd_multiplier(kx)
    elif axis == "y":
        mult = lambda kx, ky, k: _odd_multiplier(ky)
    elif axis == "z":
        mult = lambda kx, ky, k: k
    else:
        raise ValueError(f"axis must be 'x', 'y' or 'z', got {axis!r}")
    d = grid.georef.cell_size
    plane, slope_col, slope_row = _boundary_plane(grid.values)
    out = _spectral(grid.values - plane, d, mult, plan)
    if axis == "x":
        out = out + slope_col / d
    elif axis == "y":
        out = out + slope_row / d
    return grid.with_values(out, units_label=f"{grid.units_label}/m")


def lowpass(grid, cutoff_wavelength, plan=DEFAULT_PLAN):
    """Radial low-pass: flat below k_c/2, cosine roll-off, zero from k_c = 2 pi / cutoff."""
    if cutoff_wavelength < 2.0 * grid.georef.cell_size:
        raise CutoffBelowNyquist(
            f"cutoff {cutoff_wavelength} m is below twice the cell size {grid.georef.cell_size} m"
        )
    _require_unmasked(grid)
    kc = 2.0 * np.pi / cutoff_wavelength

    def mult(kx, ky, k):
        t = np.clip((k - 0.5 * kc) / (0.5 * kc), 0.0, 1.0)
        return 0.5 * (1.0 + np.cos(np.pi * t))

    return grid.with_values(_spectral(grid.values, grid.georef.cell_size, mult, plan))


# ---------------------------------------------------------------------------
# Polynomial detrending
# ---------------------------------------------------------------------------

def _exponents(degree):
    return [(i - j, j) for i in range(degree + 1) for j in range(i + 1)]


@dataclass
class PolySurface:
    """Polynomial sum(c * x**a * y**b) in raw map coordinates."""

    degree: int
    exponents: list
    coefficients: np.ndarray

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return sum(c * x**a * y**b for c, (a, b) in zip(self.coefficients, self.exponents))

    def to_dict(self):
        return {
            "degree": self.degree,
            "terms": [f"x^{a}*y^{b}" for a, b in self.exponents],
            "coefficients": self.coefficients.tolist(),
        }


def detrend_poly(grid, degree=1):
    """Remove the least-squares polynomial surface of ``degree`` (0, 1 or 2).

    Fitting uses centred, scaled coordinates; the returned coefficients are
    converted back to raw easting/northing.
    """
    if degree not in (0, 1, 2):
        raise ValueError("degree must be 0, 1 or 2")
    exps = _exponents(degree)
    X, Y = grid.georef.mesh()
    valid = ~grid.nodata_mask
    if valid.sum() <= len(exps):
        raise RankDeficient(f"{int(valid.sum())} valid cells for {len(exps)} polynomial terms")
    xc, yc = float(X[valid].mean()), float(Y[valid].mean())
    s = max(float(np.ptp(X[valid])), float(np.ptp(Y[valid])), grid.georef.cell_size) / 2.0
    u, v = (X[valid] - xc) / s, (Y[valid] - yc) / s
    A = np.column_stack([u**a * v**b for a, b in exps])
    c, _, rank, _ = np.linalg.lstsq(A, grid.values[valid], rcond=None)
    if rank < len(exps):
        raise RankDeficient(f"design matrix rank {rank} < {len(exps)} for degree {degree}")

    raw = np.zeros(len(exps))
    pos = {e: n for n, e in enumerate(exps)}
    for cij, (i, j) in zip(c, exps):
        for a, b in product(range(i + 1), range(j + 1)):
            raw[pos[(a, b)]] += (
                cij
                * math.comb(i, a) * (-xc) ** (i - a)
                * math.comb(j, b) * (-yc) ** (j - b)
                / s ** (i + j)
            )
    surface = PolySurface(degree, exps, raw)
    fitted = np.zeros_like(grid.values)
    fitted[valid] = A @ c
    resid = np.where(valid, grid.values - fitted, np.nan)
    return grid.with_values(resid), surface


FILTER_OPS = ("fill", "detrend", "upward_continue", "lowpass")


def apply_chain(grid, chain, plan=DEFAULT_PLAN):
    """Apply a list of ``{"op": name, ...params}`` steps in order.

    Returns the filtered grid and the total upward-continuation height, which
    the caller needs to refer Euler depths back to the original datum.
    """
    height = 0.0
    for step in chain:
        params = dict(step)
        op = params.pop("op")
        if op == "fill":
            grid = fill_nearest(grid)
        elif op == "detrend":
            grid, _ = detrend_poly(grid, int(params.get("degree", 1)))
        elif op == "upward_continue":
            h = float(params["height"])
            grid = upward_continue(grid, h, plan)
            height += h
        elif op == "lowpass":
            grid = lowpass(grid, float(params["cutoff_wavelength"]), plan)
        else:
            raise ValueError(f"unknown filter op {op!r}")
    return grid, height
