import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from birefpairs.errors import ConfigurationError, DomainError
from birefpairs.fibermodel import (FiberGeometry, air_fraction_quadrant, build_profile, load_geometry,
                                   silica_index, um_to_omega)

FITTED = FiberGeometry(d=0.702, D=0.820, pitch=1.088)


# Sellmeier, hand-evaluated with the Malitson coefficients at the sodium d line
def test_silica_index_d_line():
    assert silica_index(0.5876) == pytest.approx(1.4584623, abs=5e-4)
    assert silica_index(0.5876) == pytest.approx(1.4584623420532408, rel=1e-12)


def test_silica_index_pole_is_domain_error():
    with pytest.raises(DomainError):
        silica_index(0.0684043)


@pytest.mark.parametrize("bad", [0.0, -1.0, 5.0, float("nan")])
def test_silica_index_outside_window(bad):
    with pytest.raises(DomainError):
        silica_index(bad)


def test_normal_dispersion_ordering():
    assert silica_index(0.7) > silica_index(1.0)


def test_silica_monotone_and_above_one():
    lam = np.linspace(0.5, 1.7, 200)
    n = silica_index(lam)
    assert np.all(np.isreal(n)) and np.all(n > 1)
    assert np.all(np.diff(silica_index(np.linspace(0.5, 1.3, 200))) < 0)


@pytest.mark.parametrize("kw", [
    dict(d=0.0, D=0.8, pitch=1.0), dict(d=0.9, D=0.8, pitch=1.0), dict(d=0.5, D=1.0, pitch=1.0),
    dict(d=0.5, D=0.8, pitch=1.0, n_rings=2), dict(d=0.5, D=0.8, pitch=1.0, length=0.0)])
def test_geometry_invariants(kw):
    with pytest.raises(ConfigurationError):
        FiberGeometry(**kw)


def test_geometry_mapping_round_trip():
    assert FiberGeometry.from_mapping({k: str(v) for k, v in FITTED.to_dict().items()}) == FITTED


def test_load_geometry(tmp_path):
    p = tmp_path / "g.ini"
    p.write_text("[geometry]\nd_um = 0.702\nD_um = 0.820\npitch_um = 1.088\n")
    assert load_geometry(p) == FITTED
    with pytest.raises(ConfigurationError):
        load_geometry(tmp_path / "missing.ini")


@pytest.fixture(scope="module")
def profile():
    return build_profile(FITTED, float(um_to_omega(0.8)), 30.0)


def test_profile_core_and_hole_centres(profile):
    ix0, iy0 = len(profile.x) // 2, len(profile.y) // 2
    assert profile.eps[ix0, iy0] == silica_index(0.8) ** 2
    # enlarged holes sit on the y axis at (0, +-pitch); node nearest to the centre is pure air
    iy = int(np.argmin(np.abs(profile.y - FITTED.pitch)))
    assert profile.eps[ix0, iy] == 1.0
    assert profile.eps[ix0, len(profile.y) - 1 - iy] == 1.0


def test_profile_two_level_up_to_boundary_cells(profile):
    eps_si = silica_index(0.8) ** 2
    e = profile.eps
    assert e.min() == 1.0 and e.max() == eps_si
    mixed = (e > 1.0) & (e < eps_si)
    # only cells straddling a hole boundary are averaged
    assert mixed.mean() < 0.2


def test_profile_mirror_symmetry_exact(profile):
    e = profile.eps
    assert np.array_equal(e, e[::-1, :])
    assert np.array_equal(e, e[:, ::-1])


def test_profile_is_pure():
    w = float(um_to_omega(0.9))
    a = build_profile(FITTED, w, 24.0)
    b = build_profile(FITTED, w, 24.0)
    assert np.array_equal(a.eps, b.eps) and a.eps.tobytes() == b.eps.tobytes()


def test_resolution_floor():
    with pytest.raises(ConfigurationError):
        build_profile(FITTED, float(um_to_omega(0.8)), 19.0)


def test_equal_holes_near_c6_symmetric():
    g = FiberGeometry(d=0.7, D=0.7, pitch=1.0)
    p = build_profile(g, float(um_to_omega(0.8)), 40.0)
    air = 1.0 - (p.eps - 1.0) / (p.eps_background - 1.0)
    X, Y = np.meshgrid(p.x, p.y, indexing="ij")
    c, s = np.cos(np.pi / 3), np.sin(np.pi / 3)
    # sample the air fraction on rotated copies of an inner disc of nodes
    inside = np.hypot(X, Y) < 2.5
    from scipy.interpolate import RegularGridInterpolator
    f = RegularGridInterpolator((p.x, p.y), air)
    pts = np.column_stack([X[inside], Y[inside]])
    rot = pts @ np.array([[c, s], [-s, c]])
    diff = np.abs(f(pts) - f(rot))
    # rasterization error only: the mean mismatch is a small fraction of a pixel
    assert diff.mean() < 0.05


@pytest.mark.parametrize("res", [40.0, 80.0])
def test_single_hole_fill_converges(res):
    g = FiberGeometry(d=0.7, D=0.8, pitch=1.1)
    h = 1.0 / res
    n = int(np.ceil(g.pitch * 1.6 / h))
    q = np.arange(n + 1) * h
    fill = air_fraction_quadrant(g, q, q)
    # area of the enlarged hole at (0, pitch); half of it lies in x >= 0
    iy = np.abs(q - g.pitch) <= g.D / 2 + h
    ix = q <= g.D / 2 + h
    area = fill[np.ix_(ix, iy)].sum() * h * h
    cells_on_axis = fill[0, iy].sum() * h * h / 2  # x = 0 column is shared by both halves
    half = area - cells_on_axis
    exact = np.pi * (g.D / 2) ** 2 / 2
    assert abs(half - exact) / exact < 0.01


@settings(max_examples=25, deadline=None)
@given(d=st.floats(0.3, 0.9), extra=st.floats(0.0, 0.2), gap=st.floats(0.05, 0.4))
def test_profile_within_material_bounds(d, extra, gap):
    g = FiberGeometry(d=d, D=d + extra, pitch=d + extra + gap, n_rings=3)
    p = build_profile(g, float(um_to_omega(1.0)), 20.0)
    assert p.eps.min() >= 1.0 and p.eps.max() <= silica_index(1.0) ** 2 + 1e-15
