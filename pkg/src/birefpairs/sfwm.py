"""SFWM process table, phase mismatch and phase-matching contours.

Polarizations are tagged ``"x"`` (slow axis) and ``"y"`` (fast axis). Each
process fixes the polarization of pump 1, pump 2, the signal
(``lambda_s > lambda_p``) and the idler (``lambda_i < lambda_p``).
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigurationError, PhysicsError, RangeError
from .fibermodel import omega_to_um, um_to_omega
from .modesolver import interp_aeff, interp_k

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProcessId:
    label: str
    pump1_pol: str
    pump2_pol: str
    signal_pol: str
    idler_pol: str
    eta: int

    @property
    def pumps(self) -> tuple:
        return (self.pump1_pol, self.pump2_pol)

    @property
    def channel(self) -> tuple:
        """(signal, idler) polarization outcome."""
        return (self.signal_pol, self.idler_pol)

    @property
    def co_polarized(self) -> bool:
        return len({self.pump1_pol, self.pump2_pol, self.signal_pol, self.idler_pol}) == 1

    def __str__(self):
        return self.label


_TABLE = (
    ProcessId("a", "x", "x", "x", "x", 3),
    ProcessId("b", "y", "y", "y", "y", 3),
    ProcessId("c", "x", "y", "x", "y", 2),
    ProcessId("d", "x", "y", "y", "x", 2),
    ProcessId("e", "x", "x", "y", "y", 1),
    ProcessId("f", "y", "y", "x", "x", 1),
)
PROCESSES = {p.label: p for p in _TABLE}


def process_table() -> tuple:
    """The six polarization combinations, labels ``a`` to ``f``."""
    return _TABLE


def get_process(label) -> ProcessId:
    if isinstance(label, ProcessId):
        return label
    try:
        return PROCESSES[str(label).strip().lower()]
    except KeyError:
        raise ConfigurationError(f"unknown process label {label!r}; expected one of a-f") from None


@dataclass(frozen=True)
class NonlinearContext:
    """Per-process nonlinear coefficients (1/W/m) and peak pump powers (W)."""

    gamma: dict = field(default_factory=dict)
    powers: dict = field(default_factory=dict)
    enabled: bool = True

    def __post_init__(self):
        for label, g in self.gamma.items():
            if not g >= 0:
                raise ConfigurationError(f"gamma for process {label} must be >= 0, got {g}")
        for label, (p1, p2) in self.powers.items():
            if p1 < 0 or p2 < 0:
                raise ConfigurationError(f"pump powers for process {label} must be >= 0")

    @classmethod
    def disabled(cls) -> "NonlinearContext":
        return cls(enabled=False)


def nonlinear_phase(ctx: NonlinearContext, process) -> float:
    """First-order SPM/XPM phase ``gamma (p1 + p2)`` in rad/m, or 0 when disabled."""
    if ctx is None or not ctx.enabled:
        return 0.0
    label = get_process(process).label
    p1, p2 = ctx.powers.get(label, (0.0, 0.0))
    return float(ctx.gamma.get(label, 0.0) * (p1 + p2))


def gamma_coefficient(process, tables, omega_p: float, n2: float = 2.6e-20) -> float:
    """Nonlinear coefficient ``2 pi n2 / (lambda_p A_eff)`` in 1/W/m.

    ``A_eff`` is the pump mode's effective area; cross-polarized pumps use the
    mean of the two pump modes' areas.
    """
    proc = get_process(process)
    areas = [float(interp_aeff(tables[pol], omega_p)) for pol in proc.pumps]
    a_eff_m2 = 0.5 * (areas[0] + areas[1]) * 1e-12
    lam_m = float(omega_to_um(omega_p)) * 1e-6
    return 2 * np.pi * n2 / (lam_m * a_eff_m2)


def _k(tables, pol, omega, wave):
    table = tables[pol]
    try:
        return interp_k(table, omega)
    except RangeError as exc:
        raise RangeError(f"{wave} wave out of range: {exc}") from None


def delta_k(process, omega, omega_s, omega_i, tables, ctx: NonlinearContext | None = None):
    """Phase mismatch ``k1(w) + k2(ws + wi - w) - ks(ws) - ki(wi) - phi_NL`` in rad/m.

    ``omega`` is the pump-1 frequency; pump 2 takes the remainder so that
    energy is conserved. Broadcasts over array arguments.
    """
    proc = get_process(process)
    omega2 = np.asarray(omega_i) + np.asarray(omega_s) - np.asarray(omega)
    return (
        _k(tables, proc.pump1_pol, omega, "pump1")
        + _k(tables, proc.pump2_pol, omega2, "pump2")
        - _k(tables, proc.signal_pol, omega_s, "signal")
        - _k(tables, proc.idler_pol, omega_i, "idler")
        - nonlinear_phase(ctx, proc)
    )


# --- contour tracing -------------------------------------------------------

@dataclass(frozen=True)
class SpectralWindow:
    """Idler and signal wavelength windows (um) for root searches.

    ``pump_guard_um`` keeps the idler window this far below the pump, which
    excludes the trivial degenerate root at ``omega_i = omega_p`` and the
    region hidden by pump-rejection filters.
    """

    idler_um: tuple = (0.40, 3.0)
    signal_um: tuple = (0.40, 3.0)
    pump_guard_um: float = 0.005

    def idler_omega_bounds(self, lambda_p_um: float, tables=None):
        """Bracket of admissible idler frequencies at this pump, ascending."""
        wp = float(um_to_omega(lambda_p_um))
        lam_lo = self.idler_um[0]
        lam_hi = min(self.idler_um[1], lambda_p_um - self.pump_guard_um)
        if lam_hi <= lam_lo:
            return None
        wi_lo, wi_hi = float(um_to_omega(lam_hi)), float(um_to_omega(lam_lo))
        # signal constraint through ws = 2 wp - wi
        s_lo = max(self.signal_um[0], lambda_p_um + 1e-9)
        ws_hi = float(um_to_omega(s_lo))
        ws_lo = float(um_to_omega(self.signal_um[1]))
        wi_lo = max(wi_lo, 2 * wp - ws_hi)
        wi_hi = min(wi_hi, 2 * wp - ws_lo)
        if tables is not None:
            for t in tables.values():
                lo, hi = t.omega_range
                wi_hi = min(wi_hi, hi, 2 * wp - lo)
                wi_lo = max(wi_lo, lo, 2 * wp - hi)
        if wi_hi <= wi_lo:
            return None
        return wi_lo, wi_hi


# Idler and signal arms of the measurement are split by a dichroic mirror
# reflecting below 900 nm and transmitting above 990 nm.
PAPER_WINDOW = SpectralWindow(idler_um=(0.45, 0.90), signal_um=(0.99, 3.0))


class DegenerateContourError(PhysicsError):
    """Delta-k vanishes identically over the window; the contour is not a curve."""


def find_roots(process, lambda_p_um: float, tables, ctx=None, window: SpectralWindow = SpectralWindow(),
               n_scan: int = 2000, tol: float = 1e-2):
    """Idler frequencies where ``delta_k = 0`` for a monochromatic pump.

    Returns ascending ``omega_i`` roots; ``omega_s = 2 omega_p - omega_i``.
    Raises :class:`DegenerateContourError` when the mismatch is below ``tol``
    across the whole window.
    """
    proc = get_process(process)
    bounds = window.idler_omega_bounds(lambda_p_um, tables)
    if bounds is None:
        return np.array([])
    wp = float(um_to_omega(lambda_p_um))
    wi = np.linspace(bounds[0], bounds[1], n_scan)

    def f(w):
        return delta_k(proc, wp, 2 * wp - w, w, tables, ctx)

    vals = f(wi)
    if np.all(np.abs(vals) < tol):
        raise DegenerateContourError(
            f"process {proc.label}: |delta_k| < {tol} rad/m everywhere at lambda_p={lambda_p_um} um")
    roots = []
    for j in np.nonzero(vals == 0.0)[0]:
        roots.append(wi[j])
    sign = np.sign(vals)
    for j in np.nonzero(sign[:-1] * sign[1:] < 0)[0]:
        r = brentq(f, wi[j], wi[j + 1], xtol=1e-9 * wi[j], rtol=1e-15, maxiter=200)
        # polish until the mismatch itself meets the tolerance
        a, b = wi[j], wi[j + 1]
        fa = vals[j]
        for _ in range(200):
            fr = float(f(r))
            if abs(fr) < tol:
                break
            if np.sign(fr) == np.sign(fa):
                a, fa = r, fr
            else:
                b = r
            r = 0.5 * (a + b)
        roots.append(r)
    return np.array(sorted(roots))


@dataclass
class PhasematchBranch:
    """One connected piece of a ``delta_k = 0`` contour.

    ``omega`` rows are ``(omega_p, omega_s, omega_i)`` in rad/s with
    ``omega_s = 2 omega_p - omega_i``. ``ends`` records how each end
    terminates: ``"pump"`` (merges into the degenerate point), ``"fold"``
    (meets another branch), or ``"edge"`` (clipped by a window or the pump
    range).
    """

    process: ProcessId
    omega: np.ndarray
    closed: bool = False
    truncated: bool = False
    ends: tuple = ("edge", "edge")

    @property
    def lambdas_um(self) -> np.ndarray:
        """Rows of ``(lambda_p, lambda_s, lambda_i)`` in um."""
        return omega_to_um(self.omega)

    @property
    def points(self):
        return [tuple(row) for row in self.lambdas_um]

    def to_dict(self) -> dict:
        return {
            "process": self.process.label,
            "closed": bool(self.closed),
            "truncated": bool(self.truncated),
            "ends": list(self.ends),
            "points": [
                {"lambda_p_um": float(p), "lambda_s_um": float(s), "lambda_i_um": float(i)}
                for p, s, i in self.lambdas_um
            ],
        }


def _mismatch_grid(proc, lam_p, lam_i, tables, ctx, window):
    """Delta-k on the (lambda_p, lambda_i) lattice, NaN outside the windows."""
    wp = um_to_omega(lam_p)[:, None]
    wi = um_to_omega(lam_i)[None, :]
    ws = 2 * wp - wi
    with np.errstate(divide="ignore"):
        # ws <= 0 far from the pump; such cells fail the signal window below
        lam_s = omega_to_um(ws)
    valid = (lam_i[None, :] <= lam_p[:, None] - window.pump_guard_um)
    valid &= (lam_s >= window.signal_um[0]) & (lam_s <= window.signal_um[1])
    for t in tables.values():
        lo, hi = t.omega_range
        valid &= (ws >= lo) & (ws <= hi) & (wi >= lo) & (wi <= hi) & (wp >= lo) & (wp <= hi)
    out = np.full(valid.shape, np.nan)
    rows, cols = np.nonzero(valid)
    if rows.size:
        wpp = np.broadcast_to(wp, valid.shape)[rows, cols]
        wii = np.broadcast_to(wi, valid.shape)[rows, cols]
        out[rows, cols] = delta_k(proc, wpp, 2 * wpp - wii, wii, tables, ctx)
    return out


def _refine(proc, lp, li, hp, hi, tables, ctx, tol):
    """Polish a marching-squares vertex onto delta_k = 0.

    Solves along whichever axis the mismatch varies faster in grid units;
    returns ``(lambda_p, lambda_i)`` or ``None`` if no bracket is found.
    """
    def f_i(x, p=lp):
        w = float(um_to_omega(p))
        return float(delta_k(proc, w, 2 * w - um_to_omega(x), um_to_omega(x), tables, ctx))

    def f_p(x, i=li):
        w = float(um_to_omega(x))
        return float(delta_k(proc, w, 2 * w - um_to_omega(i), um_to_omega(i), tables, ctx))

    try:
        g_i = abs(f_i(li + 0.5 * hi) - f_i(li - 0.5 * hi))
        g_p = abs(f_p(lp + 0.5 * hp) - f_p(lp - 0.5 * hp))
    except RangeError:
        return None
    attempts = [("i", f_i, li, hi), ("p", f_p, lp, hp)]
    if g_p > g_i:
        attempts.reverse()
    for axis, f, x0, h in attempts:
        for span in (1.0, 2.0):
            a, b = x0 - span * h, x0 + span * h
            try:
                fa, fb = f(a), f(b)
            except RangeError:
                continue
            if fa == 0.0:
                return (a, li) if axis == "p" else (lp, a)
            if np.sign(fa) == np.sign(fb):
                continue
            x = brentq(f, a, b, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=200)
            if abs(f(x)) >= tol:
                continue
            return (x, li) if axis == "p" else (lp, x)
    return None


def trace_contours(process, lambda_p_range_um, tables, ctx=None, window: SpectralWindow = SpectralWindow(),
                   n_pump: int = 400, n_scan: int = 800, tol: float = 1e-2):
    """Trace all ``delta_k = 0`` branches of ``process`` over a pump range.

    The mismatch is sampled on a ``n_pump x n_scan`` lattice in
    ``(lambda_p, lambda_i)`` with ``omega_s = 2 omega_p - omega_i``. Marching
    squares links sign changes into connected curves, and each vertex is then
    polished onto ``delta_k = 0`` by a bracketed 1-D solve. Curves that wrap
    onto themselves, or whose open ends both merge into the pump degeneracy,
    are flagged closed.
    """
    from skimage.measure import find_contours

    proc = get_process(process)
    lp_lo, lp_hi = sorted(float(v) for v in lambda_p_range_um)
    if n_pump < 2 or n_scan < 2:
        raise ConfigurationError("contour lattice needs at least 2 samples per axis")
    lam_p = np.linspace(lp_lo, lp_hi, n_pump)
    li_hi = min(window.idler_um[1], lp_hi - window.pump_guard_um)
    if li_hi <= window.idler_um[0]:
        return []
    lam_i = np.linspace(window.idler_um[0], li_hi, n_scan)
    hp, hi = lam_p[1] - lam_p[0], lam_i[1] - lam_i[0]
    grid = _mismatch_grid(proc, lam_p, lam_i, tables, ctx, window)
    finite = np.isfinite(grid)
    if finite.any() and np.all(np.abs(grid[finite]) < tol):
        raise DegenerateContourError(
            f"process {proc.label}: |delta_k| < {tol} rad/m over the whole lattice; contour is not a curve")

    branches = []
    for path in find_contours(grid, 0.0):
        is_loop = len(path) > 2 and np.allclose(path[0], path[-1])
        pts = []
        for r, c in path:
            lp = lp_lo + r * hp
            li = window.idler_um[0] + c * hi
            got = _refine(proc, lp, li, hp, hi, tables, ctx, tol)
            if got is not None:
                pts.append(got)
        if not pts:
            continue
        lam = np.array(pts)
        wp, wi = um_to_omega(lam[:, 0]), um_to_omega(lam[:, 1])
        omega = np.column_stack([wp, 2 * wp - wi, wi])
        if is_loop:
            ends = ("loop", "loop")
        else:
            ends = tuple(_end_kind(path[k], lam_p, lam_i, window, tables, hp, hi) for k in (0, -1))
        truncated = "edge" in ends
        branches.append(PhasematchBranch(proc, omega, closed=not truncated, truncated=truncated, ends=ends))
    branches.sort(key=lambda b: (b.omega[:, 0].min(), -b.omega[:, 2].max()))
    return branches


def _end_kind(rc, lam_p, lam_i, window, tables, hp, hi):
    """Classify where an open marching-squares path stops."""
    r, c = rc
    lp = lam_p[0] + r * hp
    li = lam_i[0] + c * hi
    if r <= 1e-9 or r >= len(lam_p) - 1 - 1e-9:
        return "edge"
    if li >= lp - window.pump_guard_um - 2 * max(hi, hp):
        return "pump"
    return "edge"
def branches_to_json(branches) -> str:
    return json.dumps([b.to_dict() for b in branches], indent=1, sort_keys=True)


def branches_from_json(text) -> list:
    out = []
    for item in json.loads(text):
        lam = np.array([[p["lambda_p_um"], p["lambda_s_um"], p["lambda_i_um"]] for p in item["points"]])
        omega = um_to_omega(lam) if lam.size else np.zeros((0, 3))
        out.append(PhasematchBranch(get_process(item["process"]), omega, closed=item["closed"],
                                    truncated=item.get("truncated", False), ends=tuple(item.get("ends", ("edge", "edge")))))
    return out


def branches_to_csv(branches) -> str:
    buf = io.StringIO()
    buf.write("# units: um\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["process", "branch", "closed", "lambda_p_um", "lambda_s_um", "lambda_i_um"])
    for n, b in enumerate(branches):
        for p, s, i in b.lambdas_um:
            w.writerow([b.process.label, n, int(b.closed), repr(float(p)), repr(float(s)), repr(float(i))])
    return buf.getvalue()
