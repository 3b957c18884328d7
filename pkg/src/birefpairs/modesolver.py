"""Semivectorial finite-difference mode solver and dispersion tables.

The x-polarized operator is

    d/dx [ (1/eps) d/dx (eps Ex) ] + d2/dy2 Ex + k0^2 eps Ex = beta^2 Ex

and the y-polarized one follows by exchanging the axes. On the node grid the
flux term across a cell face uses the arithmetic mean of the two adjacent
permittivities (the harmonic mean of 1/eps), which keeps the normal
displacement continuous across x-normal interfaces for Ex. Tangential faces
see the plain Laplacian.

Profiles are mirror symmetric, and the fundamental HE11 modes are even in
both coordinates, so the eigenproblem is posed on the ``x >= 0, y >= 0``
quadrant with even reflection on the axes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.constants import c
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.special import j0, j1, k0, k1

from .errors import ConfigurationError, NumericError, PhysicsError, RangeError
from .fibermodel import FiberGeometry, IndexProfile, build_profile, omega_to_um

log = logging.getLogger(__name__)

SOLVER_VERSION = "svfd-1"
POLARIZATIONS = ("x", "y")


@dataclass(frozen=True, eq=False)
class ModeField:
    amplitude: np.ndarray
    polarization: str
    n_eff: float
    omega: float
    dx: float
    dy: float
    residual: float = 0.0
    iterations: int = 0


def _axis_terms(eps_line, h, weighted, boundary):
    """Off-diagonal and diagonal coefficients of one 1-D second difference.

    ``eps_line`` has the axis of differentiation first. Returns ``(lower,
    diag, upper)`` arrays of the same shape where ``lower[i]`` multiplies
    node ``i-1`` and ``upper[i]`` node ``i+1``; node 0 lies on a mirror plane.
    """
    e = eps_line if weighted else np.ones_like(eps_line)
    pad = np.concatenate([e, e[-1:]], axis=0)
    a_face = 2.0 / (pad[:-1] + pad[1:])          # face i+1/2, i = 0..n-1
    a_back = np.concatenate([a_face[:1], a_face[:-1]], axis=0)  # face i-1/2 (mirror at 0)
    upper = np.zeros_like(e)
    lower = np.zeros_like(e)
    upper[:-1] = a_face[:-1] * e[1:] / h**2
    lower[1:] = a_back[1:] * e[:-1] / h**2
    upper[0] *= 2.0
    diag = -e * (a_face + a_back) / h**2
    if boundary == "neumann":
        diag[-1] += a_face[-1] * e[-1] / h**2
    return lower, diag, upper


def build_operator(eps_quad: np.ndarray, k0_um: float, dx: float, dy: float, polarization: str,
                   boundary: str = "dirichlet") -> sp.csr_matrix:
    """Sparse semivectorial operator on the quadrant, unknowns in C order ``[ix, iy]``."""
    if polarization not in POLARIZATIONS:
        raise ConfigurationError(f"polarization must be 'x' or 'y', got {polarization!r}")
    if boundary not in ("dirichlet", "neumann"):
        raise ConfigurationError(f"unknown boundary {boundary!r}")
    nx, ny = eps_quad.shape
    lx, dgx, ux = _axis_terms(eps_quad, dx, polarization == "x", boundary)
    ly, dgy, uy = _axis_terms(eps_quad.T, dy, polarization == "y", boundary)
    ly, dgy, uy = ly.T, dgy.T, uy.T
    diag = dgx + dgy + k0_um**2 * eps_quad
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows = [idx.ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    cols = [idx.ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    vals = [diag.ravel(), lx[1:, :].ravel(), ux[:-1, :].ravel(), ly[:, 1:].ravel(), uy[:, :-1].ravel()]
    n = nx * ny
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def _full_from_quadrant(q):
    full = np.concatenate([q[:0:-1], q], axis=0)
    return np.concatenate([full[:, :0:-1], full], axis=1)


def solve_mode(profile: IndexProfile, omega: float, polarization: str, *, boundary: str = "dirichlet",
               max_iter: int = 500, tol: float = 1e-10) -> ModeField:
    """Fundamental mode of ``profile`` by shift-invert power iteration.

    The shift sits just above ``(k0 n_max)^2`` so the iteration converges to
    the largest-``n_eff`` even-even eigenpair. Raises :class:`NumericError`
    when the normalized residual does not reach ``tol`` within ``max_iter``
    and :class:`PhysicsError` when the mode is not guided.
    """
    lam_um = float(omega_to_um(omega))
    k0_um = 2 * np.pi / lam_um
    eps_q = np.ascontiguousarray(profile.quadrant())
    dx, dy = profile.dx, profile.dy
    A = build_operator(eps_q, k0_um, dx, dy, polarization, boundary)
    eps_max = float(profile.eps.max())
    sigma = k0_um**2 * eps_max * (1.0 + 1e-7)
    lu = spla.splu((A - sigma * sp.identity(A.shape[0], format="csr")).tocsc())

    X, Y = np.meshgrid(np.arange(eps_q.shape[0]) * dx, np.arange(eps_q.shape[1]) * dy, indexing="ij")
    w0 = 0.5 * min(X[-1, 0], Y[0, -1])
    v = np.exp(-(X**2 + Y**2) / w0**2).ravel()
    v /= np.linalg.norm(v)
    lam = sigma
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        v_new = lu.solve(v)
        v_new /= np.linalg.norm(v_new)
        if v_new[0] < 0:
            v_new = -v_new
        Av = A @ v_new
        lam = float(v_new @ Av)
        res = float(np.linalg.norm(Av - lam * v_new) / abs(lam))
        v = v_new
        if res < tol:
            break
    else:
        raise NumericError(
            f"eigensolver did not converge at omega={omega:.6e} rad/s ({polarization}-pol): residual {res:.3e}",
            residual=res,
        )
    if lam <= k0_um**2:
        raise PhysicsError(f"no guided mode at omega={omega:.6e} rad/s: n_eff^2 = {lam / k0_um**2:.6f} <= 1")
    n_eff = float(np.sqrt(lam) / k0_um)
    full = _full_from_quadrant(v.reshape(eps_q.shape))
    full /= np.sqrt(np.sum(full**2) * dx * dy)
    return ModeField(amplitude=full, polarization=polarization, n_eff=n_eff, omega=float(omega),
                     dx=dx, dy=dy, residual=res, iterations=it)


def effective_area(field: ModeField | np.ndarray, dx: float | None = None, dy: float | None = None) -> float:
    """``(int |E|^2)^2 / int |E|^4`` in um^2."""
    if isinstance(field, ModeField):
        amp, dx, dy = field.amplitude, field.dx, field.dy
    else:
        amp = np.asarray(field)
    I = np.abs(amp) ** 2
    num = np.sum(I) * dx * dy
    den = np.sum(I**2) * dx * dy
    if not num > 0:
        raise NumericError("effective area of a zero field")
    return float(num**2 / den)


# --- analytic oracle -------------------------------------------------------

def _lp01_dispersion(u, v):
    w = np.sqrt(np.maximum(v * v - u * u, 0.0))
    return u * j1(u) / j0(u) - w * k1(w) / k0(w)


def step_index_oracle(core_radius: float, n_core: float, n_clad: float, wavelength_um: float) -> float:
    """LP01 effective index of a weakly guiding step-index fiber.

    Solves ``U J1(U)/J0(U) = W K1(W)/K0(W)`` with ``U^2 + W^2 = V^2`` for
    ``U`` in ``(0, min(V, j_{0,1}))`` by Brent's method.
    """
    if not n_core > n_clad:
        raise PhysicsError(f"no guided LP01 root: n_core={n_core} <= n_clad={n_clad}")
    k0_um = 2 * np.pi / wavelength_um
    V = k0_um * core_radius * np.sqrt(n_core**2 - n_clad**2)
    hi = min(V, 2.404825557695773) * (1 - 1e-13)
    lo = 1e-12
    if not (_lp01_dispersion(lo, V) < 0 < _lp01_dispersion(hi, V)):
        raise PhysicsError(f"no LP01 root bracketed for V={V:.4f}")
    u = brentq(_lp01_dispersion, lo, hi, args=(V,), xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(np.sqrt(n_core**2 - (u / (k0_um * core_radius)) ** 2))


def v_number(core_radius, n_core, n_clad, wavelength_um):
    return 2 * np.pi / wavelength_um * core_radius * np.sqrt(n_core**2 - n_clad**2)


# --- dispersion tables -----------------------------------------------------

def _central_derivative(x, y):
    """Second-order derivative on a possibly nonuniform grid."""
    d = np.empty_like(y)
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    d[1:-1] = (hm**2 * (y[2:] - y[1:-1]) + hp**2 * (y[1:-1] - y[:-2])) / (hm * hp * (hm + hp))
    h1, h2 = x[1] - x[0], x[2] - x[1]
    d[0] = (-(2 * h1 + h2) / (h1 * (h1 + h2))) * y[0] + ((h1 + h2) / (h1 * h2)) * y[1] - (h1 / (h2 * (h1 + h2))) * y[2]
    h1, h2 = x[-1] - x[-2], x[-2] - x[-3]
    d[-1] = ((2 * h1 + h2) / (h1 * (h1 + h2))) * y[-1] - ((h1 + h2) / (h1 * h2)) * y[-2] + (h1 / (h2 * (h1 + h2))) * y[-3]
    return d


CSV_COLUMNS = ("omega_rad_s", "k_rad_m", "n_eff", "v_g_m_s", "A_eff_um2")


@dataclass(frozen=True, eq=False)
class DispersionTable:
    """Sampled dispersion of one polarization mode; ``omega`` ascending."""

    polarization: str
    omega: np.ndarray
    k: np.ndarray
    n_eff: np.ndarray
    v_g: np.ndarray
    a_eff: np.ndarray

    def __post_init__(self):
        for arr in (self.omega, self.k, self.n_eff, self.v_g, self.a_eff):
            arr.setflags(write=False)
        if np.any(np.diff(self.omega) <= 0):
            raise ConfigurationError("dispersion table frequencies must be strictly ascending")

    @classmethod
    def from_samples(cls, polarization, omega, n_eff, a_eff):
        omega = np.asarray(omega, dtype=float)
        n_eff = np.asarray(n_eff, dtype=float)
        k = n_eff * omega / c
        v_g = 1.0 / _central_derivative(omega, k)
        return cls(polarization, omega, k, n_eff, v_g, np.asarray(a_eff, dtype=float))

    @property
    def omega_range(self):
        return float(self.omega[0]), float(self.omega[-1])

    @cached_property
    def _k_spline(self):
        return CubicSpline(self.omega, self.k)

    @cached_property
    def _n_spline(self):
        return CubicSpline(self.omega, self.n_eff)

    @cached_property
    def _vg_spline(self):
        return CubicSpline(self.omega, self.v_g)

    @cached_property
    def _aeff_spline(self):
        return CubicSpline(self.omega, self.a_eff)

    def check_range(self, omega, what="omega"):
        w = np.asarray(omega, dtype=float)
        lo, hi = self.omega_range
        tol = 1e-12 * hi
        if np.any(w < lo - tol):
            raise RangeError(f"{what} = {np.min(w):.6e} rad/s below table lower bound {lo:.6e} rad/s "
                             f"({self.polarization}-pol, lambda {omega_to_um(lo):.4f} um)")
        if np.any(w > hi + tol):
            raise RangeError(f"{what} = {np.max(w):.6e} rad/s above table upper bound {hi:.6e} rad/s "
                             f"({self.polarization}-pol, lambda {omega_to_um(hi):.4f} um)")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# polarization={self.polarization}\n")
        buf.write("# units: rad/s, rad/m, 1, m/s, um^2\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in zip(self.omega, self.k, self.n_eff, self.v_g, self.a_eff):
            writer.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            atomic_write_text(path, text)
        return text

    @classmethod
    def from_csv(cls, path_or_text) -> "DispersionTable":
        text = path_or_text
        if isinstance(path_or_text, (str, os.PathLike)) and not str(path_or_text).lstrip().startswith("#"):
            text = Path(path_or_text).read_text()
        pol = None
        body = []
        for line in text.splitlines():
            if line.startswith("#"):
                if line.startswith("# polarization="):
                    pol = line.split("=", 1)[1].strip()
                continue
            body.append(line)
        rows = list(csv.reader(body))
        if not rows or tuple(rows[0]) != CSV_COLUMNS:
            raise ConfigurationError(f"unexpected dispersion CSV header {rows[:1]}")
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(pol or "x", data[:, 0].copy(), data[:, 1].copy(), data[:, 2].copy(), data[:, 3].copy(),
                   data[:, 4].copy())


def interp_k(table: DispersionTable, omega):
    """Propagation constant (rad/m) by cubic-spline interpolation; no extrapolation."""
    table.check_range(omega)
    return table._k_spline(omega)


def interp_n(table: DispersionTable, omega):
    table.check_range(omega)
    return table._n_spline(omega)


def interp_vg(table: DispersionTable, omega):
    table.check_range(omega)
    return table._vg_spline(omega)


def interp_aeff(table: DispersionTable, omega):
    table.check_range(omega)
    return table._aeff_spline(omega)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class ScanSettings:
    """Solver fidelity for a dispersion scan."""

    wavelength_range_um: tuple = (0.45, 1.9)
    n_samples: int = 48
    resolution: float = 30.0
    boundary: str = "dirichlet"

    def omega_grid(self):
        from .fibermodel import um_to_omega
        lo, hi = sorted(self.wavelength_range_um)
        return np.linspace(float(um_to_omega(hi)), float(um_to_omega(lo)), self.n_samples)


def dispersion_scan(geometry: FiberGeometry, omega_range, n_samples: int = 48, polarization: str = "x",
                    resolution: float = 30.0, boundary: str = "dirichlet") -> DispersionTable:
    """Solve the fundamental mode at ``n_samples`` frequencies spaced evenly in omega."""
    if n_samples < 16:
        raise ConfigurationError(f"n_samples must be >= 16, got {n_samples}")
    lo, hi = sorted(float(w) for w in omega_range)
    omegas = np.linspace(lo, hi, n_samples)
    n_eff = np.empty(n_samples)
    a_eff = np.empty(n_samples)
    for i, w in enumerate(omegas):
        try:
            profile = build_profile(geometry, w, resolution)
            mode = solve_mode(profile, w, polarization, boundary=boundary)
        except (NumericError, PhysicsError) as exc:
            raise type(exc)(f"dispersion scan failed at omega={w:.6e} rad/s "
                            f"(lambda={omega_to_um(w):.4f} um): {exc}") from exc
        n_eff[i] = mode.n_eff
        a_eff[i] = effective_area(mode)
        log.debug("%s-pol lambda=%.4f um n_eff=%.8f it=%d", polarization, omega_to_um(w), mode.n_eff,
                  mode.iterations)
    return DispersionTable.from_samples(polarization, omegas, n_eff, a_eff)


class DispersionCache:
    """On-disk cache of dispersion tables keyed by a content hash."""

    def __init__(self, root=None):
        if root is None:
            root = os.environ.get("BIREFPAIRS_CACHE", Path.home() / ".cache" / "birefpairs")
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(geometry: FiberGeometry, omega_range, n_samples, polarization, resolution, boundary="dirichlet"):
        payload = {
            "solver": SOLVER_VERSION,
            "geometry": {k: repr(float(v)) for k, v in geometry.to_dict().items() if k != "length_m"},
            "omega_range": [repr(float(w)) for w in sorted(omega_range)],
            "n_samples": int(n_samples),
            "polarization": polarization,
            "resolution": repr(float(resolution)),
            "boundary": boundary,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:24]

    def get(self, geometry, omega_range, n_samples=48, polarization="x", resolution=30.0,
            boundary="dirichlet") -> DispersionTable:
        path = self.root / f"{self.key(geometry, omega_range, n_samples, polarization, resolution, boundary)}.csv"
        if path.is_file():
            self.hits += 1
            return DispersionTable.from_csv(path)
        self.misses += 1
        table = dispersion_scan(geometry, omega_range, n_samples, polarization, resolution, boundary)
        table.to_csv(path)
        return table

    def pair(self, geometry, omega_range, n_samples=48, resolution=30.0):
        return {p: self.get(geometry, omega_range, n_samples, p, resolution) for p in POLARIZATIONS}
