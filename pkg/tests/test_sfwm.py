import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from birefpairs import sfwm
from birefpairs.errors import ConfigurationError, RangeError
from birefpairs.fibermodel import um_to_omega
from birefpairs.modesolver import DispersionTable
from birefpairs.sfwm import (PAPER_WINDOW, DegenerateContourError, NonlinearContext, delta_k, find_roots,
                             gamma_coefficient, get_process, nonlinear_phase, process_table, trace_contours)

TABLE1 = {"a": ("xxxx", 3), "b": ("yyyy", 3), "c": ("xyxy", 2), "d": ("xyyx", 2), "e": ("xxyy", 1),
          "f": ("yyxx", 1)}


def test_process_table_matches_table1():
    procs = process_table()
    assert [p.label for p in procs] == list("abcdef")
    for p in procs:
        pols, eta = TABLE1[p.label]
        assert (p.pump1_pol, p.pump2_pol, p.signal_pol, p.idler_pol) == tuple(pols)
        assert p.eta == eta


def test_get_process_unknown():
    with pytest.raises(ConfigurationError):
        get_process("g")


def flat_tables(n=1.45, area=2.0):
    w = np.linspace(1.0e15, 5.0e15, 40)
    t = DispersionTable.from_samples("x", w, np.full_like(w, n), np.full_like(w, area))
    return {"x": t, "y": t}


def test_linear_dispersion_cancels():
    tabs = flat_tables()
    wp = 2.5e15
    wi = np.linspace(2.6e15, 3.5e15, 50)
    ws = 2 * wp - wi
    for w in (wp, wp + 1e12):
        dk = delta_k("a", w, ws, wi, tabs, NonlinearContext.disabled())
        assert np.max(np.abs(dk)) < 1e-6 * tabs["x"].k.max()


def test_linear_dispersion_is_degenerate_contour():
    with pytest.raises(DegenerateContourError):
        trace_contours("a", (0.70, 0.80), flat_tables(), NonlinearContext.disabled(), n_pump=20, n_scan=40)


def test_signal_idler_swap_copolarized(fitted_tables):
    wp = float(um_to_omega(0.741))
    wi = float(um_to_omega(0.6))
    ws = 2 * wp - wi
    for label in ("a", "b"):
        assert delta_k(label, wp, ws, wi, fitted_tables) == pytest.approx(
            delta_k(label, wp, wi, ws, fitted_tables), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(li=st.floats(0.5, 0.72), dw=st.floats(-2e12, 2e12))
def test_c_d_swap_symmetry(fitted_tables, li, dw):
    wp = float(um_to_omega(0.741))
    wi = float(um_to_omega(li))
    ws = 2 * wp - wi
    ctx = NonlinearContext(gamma={k: 0.2 for k in "abcdef"}, powers={k: (60.0, 60.0) for k in "abcdef"})
    a = delta_k("c", wp + dw, ws, wi, fitted_tables, ctx)
    b = delta_k("d", wp + dw, wi, ws, fitted_tables, ctx)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-9)


def test_delta_k_range_error_names_wave(fitted_tables):
    wp = float(um_to_omega(0.741))
    wi = float(um_to_omega(0.6))
    with pytest.raises(RangeError, match="pump1"):
        delta_k("a", float(um_to_omega(0.3)), 2 * wp - wi, wi, fitted_tables)


def test_nonlinear_phase_examples():
    ctx = NonlinearContext(gamma={k: 0.07 for k in "abcdef"}, powers={k: (1.0, 1.0) for k in "abcdef"})
    assert nonlinear_phase(ctx, get_process("a")) == pytest.approx(0.14, rel=1e-12)
    assert nonlinear_phase(NonlinearContext.disabled(), get_process("a")) == 0.0
    zero = NonlinearContext(gamma={k: 0.07 for k in "abcdef"}, powers={k: (0.0, 0.0) for k in "abcdef"})
    assert nonlinear_phase(zero, get_process("c")) == 0.0
    off = NonlinearContext(gamma=ctx.gamma, powers=ctx.powers, enabled=False)
    assert nonlinear_phase(off, get_process("a")) == 0.0


def test_gamma_examples():
    wp = float(um_to_omega(0.741))
    g = gamma_coefficient("a", flat_tables(area=2.0), wp, 2.6e-20)
    assert g == pytest.approx(2 * np.pi * 2.6e-20 / (0.741e-6 * 2.0e-12), rel=1e-9)
    assert g == pytest.approx(0.110, abs=5e-4)
    assert gamma_coefficient("a", flat_tables(area=4.0), wp, 2.6e-20) == pytest.approx(g / 2, rel=1e-12)
    assert gamma_coefficient("a", flat_tables(), wp, 0.0) == 0.0


def test_context_validation():
    with pytest.raises(ConfigurationError):
        NonlinearContext(gamma={k: -1.0 for k in "abcdef"}, powers={k: (1.0, 1.0) for k in "abcdef"})


# --- roots and contours at the fitted geometry -------------------------------

def test_roots_at_0741_paper_window(fitted_tables):
    counts = {p.label: len(find_roots(p, 0.741, fitted_tables, None, PAPER_WINDOW)) for p in process_table()}
    for label in "abcde":
        assert counts[label] >= 1, counts
    assert counts["f"] == 0


def test_roots_satisfy_tolerance(fitted_tables):
    wp = float(um_to_omega(0.741))
    for p in "abcde":
        for wi in find_roots(p, 0.741, fitted_tables, None, PAPER_WINDOW):
            assert abs(delta_k(p, wp, 2 * wp - wi, wi, fitted_tables)) < 1e-2


@pytest.fixture(scope="module")
def contours_a(fitted_tables):
    return trace_contours("a", (0.66, 1.30), fitted_tables, None, n_pump=400, n_scan=800)


def test_process_a_closed_loop(contours_a):
    assert any(b.closed for b in contours_a)
    loop = max(contours_a, key=lambda b: len(b.omega))
    assert loop.closed and loop.ends == ("pump", "pump")
    lam = loop.lambdas_um
    # bridges visible idler and infrared signal
    assert lam[:, 2].min() < 0.6 and lam[:, 1].max() > 1.2


def test_branch_points_on_contour(contours_a, fitted_tables):
    for b in contours_a:
        wp, ws, wi = b.omega.T
        assert np.all(np.abs(delta_k("a", wp, ws, wi, fitted_tables)) < 1e-2)
        assert np.array_equal(ws, 2 * wp - wi)


def test_branch_json_round_trip(contours_a):
    back = sfwm.branches_from_json(sfwm.branches_to_json(contours_a))
    assert len(back) == len(contours_a)
    for a, b in zip(contours_a, back):
        assert a.closed == b.closed and a.ends == b.ends
        assert np.allclose(a.lambdas_um, b.lambdas_um, rtol=1e-15, atol=0)
    assert sfwm.branches_to_csv(contours_a).startswith("# units: um")


def test_contours_deterministic(fitted_tables):
    a = trace_contours("c", (0.72, 0.78), fitted_tables, None, PAPER_WINDOW, n_pump=60, n_scan=200)
    b = trace_contours("c", (0.72, 0.78), fitted_tables, None, PAPER_WINDOW, n_pump=60, n_scan=200)
    assert sfwm.branches_to_json(a) == sfwm.branches_to_json(b)
