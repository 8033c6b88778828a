"""Analytic test fields with known source parameters.

Coordinates: x east, y north, z positive *down*; the observation surface is
z = 0 unless a grid is evaluated at a different level through ``obs_z``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geodata import Grid

# nT per (A m^2 / m^3): mu0 / 4pi in T m / A, times 1e9
_CM_NT = 100.0


@dataclass(frozen=True)
class HomogeneousSource:
    x0: float
    y0: float
    z0: float
    amplitude: float
    si: float
    base: float = 0.0

    def __post_init__(self):
        if not self.z0 > 0:
            raise ValueError("source depth z0 must be > 0")
        if not 0 < self.si <= 3:
            raise ValueError("structural index must lie in (0, 3]")


@dataclass(frozen=True)
class DipoleSource:
    x0: float
    y0: float
    z0: float
    moment: float
    inclination: float = 90.0
    declination: float = 0.0

    def __post_init__(self):
        if not self.z0 > 0:
            raise ValueError("source depth z0 must be > 0")
        if not -90 <= self.inclination <= 90:
            raise ValueError("inclination must be within [-90, 90]")
        if not 0 <= self.declination < 360:
            raise ValueError("declination must be within [0, 360)")


def unit_vector(inclination, declination):
    """(east, north, down) unit vector for inclination/declination in degrees."""
    inc, dec = np.radians(inclination), np.radians(declination)
    return np.array([np.cos(inc) * np.sin(dec), np.cos(inc) * np.cos(dec), np.sin(inc)])


def homogeneous_field(source, x, y, z=0.0):
    """Return ``(T, Tx, Ty, Tz)`` of T = base + A * r**(-N) at points (x, y, z)."""
    dx = x - source.x0
    dy = y - source.y0
    dz = z - source.z0
    r2 = dx * dx + dy * dy + dz * dz
    n = source.si
    core = source.amplitude * r2 ** (-0.5 * n)
    g = -n * core / r2
    return source.base + core, g * dx, g * dy, g * dz


def synth_homogeneous(source, georef, gradients=False, obs_z=0.0):
    """Grid the homogeneous field; with ``gradients=True`` return (T, Tx, Ty, Tz) grids.

    ``Tz`` is the derivative along +z, i.e. toward the source.
    """
    X, Y = georef.mesh()
    T, Tx, Ty, Tz = homogeneous_field(source, X, Y, obs_z)
    grid = Grid(georef, T, units_label="nT")
    if not gradients:
        return grid
    return (
        grid,
        Grid(georef, Tx, units_label="nT/m"),
        Grid(georef, Ty, units_label="nT/m"),
        Grid(georef, Tz, units_label="nT/m"),
    )


def dipole_tmi(source, x, y, field_inclination, field_declination, z=0.0, gradients=False):
    """Dipole total-field anomaly; with ``gradients`` also its analytic x, y, z derivatives."""
    m_hat = unit_vector(source.inclination, source.declination)
    f_hat = unit_vector(field_inclination, field_declination)
    r = (x - source.x0, y - source.y0, z - source.z0)
    r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
    inv3 = 1.0 / (r2 * np.sqrt(r2))
    inv5 = inv3 / r2
    mr = m_hat[0] * r[0] + m_hat[1] * r[1] + m_hat[2] * r[2]
    fr = f_hat[0] * r[0] + f_hat[1] * r[1] + f_hat[2] * r[2]
    mf = float(m_hat @ f_hat)
    scale = _CM_NT * source.moment
    T = scale * (3.0 * mr * fr * inv5 - mf * inv3)
    if not gradients:
        return T
    grads = tuple(
        scale * (3.0 * (m_hat[i] * fr + f_hat[i] * mr) * inv5
                 - 15.0 * mr * fr * r[i] * inv5 / r2
                 + 3.0 * mf * r[i] * inv5)
        for i in range(3)
    )
    return (T,) + grads


def synth_dipole(source, georef, field_inclination=90.0, field_declination=0.0, obs_z=0.0,
                 gradients=False):
    """Total-field anomaly of a point dipole projected on the ambient-field direction.

    With ``gradients=True`` returns (T, Tx, Ty, Tz) grids, Tz along +z (down).
    """
    X, Y = georef.mesh()
    out = dipole_tmi(source, X, Y, field_inclination, field_declination, obs_z, gradients)
    if not gradients:
        return Grid(georef, out, units_label="nT")
    return tuple(Grid(georef, v, units_label=u) for v, u in zip(out, ("nT", "nT/m", "nT/m", "nT/m")))


def noise_generator(seed):
    """Counter-based (Philox) generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def add_noise(grid, sigma, seed):
    """Add zero-mean Gaussian noise of standard deviation ``sigma``.

    One normal deviate is drawn per cell in row-major order, masked or not,
    so the noise at a cell does not depend on the mask.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return grid.with_values(grid.values.copy())
    noise = noise_generator(seed).standard_normal(grid.values.shape)
    return grid.with_values(grid.values + sigma * noise)
