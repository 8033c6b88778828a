import numpy as np
import pytest

from aeromag.geodata import Grid, GridGeoref
from aeromag.synthetics import (
    DipoleSource, HomogeneousSource, add_noise, dipole_tmi, homogeneous_field, synth_dipole,
    synth_homogeneous, unit_vector,
)

G = GridGeoref(0.0, 0.0, 100.0, 64, 64)


def centre_source(**kw):
    x, y = G.cell_center(32, 32)
    args = dict(x0=x, y0=y, z0=200.0, amplitude=1e8, si=2.0)
    args.update(kw)
    return HomogeneousSource(**args)


def test_apex_value():
    s = centre_source()
    T = synth_homogeneous(s, G)
    assert T.values[32, 32] == 1e8 / 200.0**2 == 2500.0
    s = centre_source(si=1.5, base=7.0)
    assert synth_homogeneous(s, G).values[32, 32] == pytest.approx(7.0 + 1e8 * 200.0**-1.5, rel=1e-15)


def test_peak_at_nearest_cell():
    x, y = G.cell_center(10, 40)
    T = synth_homogeneous(HomogeneousSource(x + 20.0, y - 30.0, 150.0, 1e7, 2.5), G)
    assert np.unravel_index(np.argmax(T.values), T.values.shape) == (10, 40)


@pytest.mark.parametrize("si", [0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
def test_analytic_gradients_vs_finite_difference(si, rng):
    s = centre_source(si=si)
    x = rng.uniform(0, 6400, 100)
    y = rng.uniform(0, 6400, 100)
    h = 1e-3
    _, Tx, Ty, Tz = homogeneous_field(s, x, y)
    fx = (homogeneous_field(s, x + h, y)[0] - homogeneous_field(s, x - h, y)[0]) / (2 * h)
    fy = (homogeneous_field(s, x, y + h)[0] - homogeneous_field(s, x, y - h)[0]) / (2 * h)
    fz = (homogeneous_field(s, x, y, h)[0] - homogeneous_field(s, x, y, -h)[0]) / (2 * h)
    for a, f in ((Tx, fx), (Ty, fy), (Tz, fz)):
        assert np.all(np.abs(a - f) <= 1e-6 * np.abs(a) + 1e-12)


@pytest.mark.parametrize("si", [0.5, 1.0, 2.0, 3.0])
def test_euler_relation_holds(si):
    s = centre_source(si=si, base=13.0)
    T, Tx, Ty, Tz = synth_homogeneous(s, G, gradients=True)
    X, Y = G.mesh()
    lhs = (X - s.x0) * Tx.values + (Y - s.y0) * Ty.values + (0.0 - s.z0) * Tz.values
    rhs = si * (s.base - T.values)
    assert np.all(np.abs(lhs - rhs) <= 1e-9 * np.abs(rhs) + 1e-12)


def test_source_validation():
    with pytest.raises(ValueError):
        HomogeneousSource(0, 0, 0.0, 1, 1)
    with pytest.raises(ValueError):
        HomogeneousSource(0, 0, 10, 1, 0.0)
    with pytest.raises(ValueError):
        DipoleSource(0, 0, 10, 1, inclination=95)
    with pytest.raises(ValueError):
        DipoleSource(0, 0, 10, 1, declination=360)


def test_unit_vector():
    assert np.allclose(unit_vector(90, 0), [0, 0, 1])
    assert np.allclose(unit_vector(0, 90), [1, 0, 0])
    assert np.linalg.norm(unit_vector(37, 211)) == pytest.approx(1.0)


def test_dipole_vertical_rotational_symmetry():
    x, y = G.cell_center(32, 32)
    T = synth_dipole(DipoleSource(x, y, 300.0, 1e9, 90, 0), G, 90, 0).values
    a, b = 5, 9
    ring = [T[32 + a, 32 + b], T[32 - b, 32 + a], T[32 - a, 32 - b], T[32 + b, 32 - a]]
    assert np.ptp(ring) <= 1e-12 * abs(ring[0])


def test_dipole_linear_in_moment():
    x, y = G.cell_center(32, 32)
    t1 = synth_dipole(DipoleSource(x, y, 300.0, 1e9, 60, 10), G, 60, 10).values
    t2 = synth_dipole(DipoleSource(x, y, 300.0, 2e9, 60, 10), G, 60, 10).values
    assert np.allclose(t2, 2 * t1, rtol=1e-15, atol=0)


def test_dipole_far_field_exponent():
    s = DipoleSource(0.0, 0.0, 100.0, 1e9, 90, 0)
    r = np.linspace(1000.0, 2000.0, 50)
    T = np.abs(dipole_tmi(s, r, np.zeros_like(r), 90, 0))
    slope = np.polyfit(np.log(r), np.log(T), 1)[0]
    assert 2.9 <= -slope <= 3.1


def test_dipole_gradients_vs_finite_difference(rng):
    s = DipoleSource(3000.0, 3000.0, 400.0, 1e9, 35, 20)
    x = rng.uniform(0, 6000, 100)
    y = rng.uniform(0, 6000, 100)
    _, gx, gy, gz = dipole_tmi(s, x, y, -15, 2, gradients=True)
    h = 1e-3
    f = lambda x, y, z=0.0: dipole_tmi(s, x, y, -15, 2, z)
    fx = (f(x + h, y) - f(x - h, y)) / (2 * h)
    fz = (f(x, y, h) - f(x, y, -h)) / (2 * h)
    assert np.all(np.abs(gx - fx) <= 1e-6 * np.abs(gx).max())
    assert np.all(np.abs(gz - fz) <= 1e-6 * np.abs(gz).max())
    fy = (f(x, y + h) - f(x, y - h)) / (2 * h)
    assert np.all(np.abs(gy - fy) <= 1e-6 * np.abs(gy).max())


def test_dipole_decays_to_zero():
    s = DipoleSource(0.0, 0.0, 100.0, 1e9, 45, 0)
    near = abs(dipole_tmi(s, np.array([0.0]), np.array([0.0]), 45, 0)[0])
    far = abs(dipole_tmi(s, np.array([1e6]), np.array([0.0]), 45, 0)[0])
    assert far < 1e-10 * near


def test_noise_zero_sigma_identity():
    g = synth_homogeneous(centre_source(), G)
    assert np.array_equal(add_noise(g, 0.0, 1).values, g.values)


def test_noise_deterministic_and_moments():
    g = Grid(GridGeoref(0, 0, 1, 256, 256), np.zeros((256, 256)))
    a = add_noise(g, 1.0, 42)
    b = add_noise(g, 1.0, 42)
    c = add_noise(g, 1.0, 43)
    assert np.array_equal(a.values, b.values) and not np.array_equal(a.values, c.values)
    assert 0.97 <= a.values.std(ddof=1) <= 1.03
    assert abs(a.values.mean()) < 0.02


def test_noise_stream_is_pinned():
    # Philox stream: guards against silent generator changes across platforms
    g = Grid(GridGeoref(0, 0, 1, 2, 2), np.zeros((2, 2)))
    v = add_noise(g, 1.0, 2024).values.ravel()
    expected = np.random.Generator(np.random.Philox(key=2024)).standard_normal(4)
    assert np.array_equal(v, expected)


def test_noise_preserves_mask():
    v = np.ones((4, 4))
    v[0, 0] = np.nan
    out = add_noise(Grid(GridGeoref(0, 0, 1, 4, 4), v), 1.0, 3)
    assert out.nodata_mask[0, 0] and out.nodata_mask.sum() == 1
    with pytest.raises(ValueError):
        add_noise(out, -1.0, 3)
