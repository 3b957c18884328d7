"""Scale-invariant dispersion surrogate for fast geometry fitting.

Maxwell's equations are scale invariant, so for a given material
permittivity the effective index of the lattice depends on the geometry
only through ``q = d/D``, ``r = D/pitch`` and ``v = pitch/lambda``. The
surrogate tabulates ``n_eff`` and the scaled area ``A_eff / pitch^2`` from
full mode solves on a lattice over ``(q, r, v, eps_silica)`` and
interpolates with tensor cubic splines over ``(q, r, log v)`` on each
permittivity slice, combined by quadratic Lagrange weights in ``eps``. A
candidate geometry then costs a few spline evaluations instead of a
dispersion scan.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigurationError, NumericError
from .fibermodel import FiberGeometry, IndexProfile, air_fraction_quadrant, _mirror, _node_axis, omega_to_um, \
    silica_index, um_to_omega
from .modesolver import POLARIZATIONS, DispersionTable, effective_area, solve_mode

log = logging.getLogger(__name__)

SURROGATE_FILE = "surrogate_v1.npz"


@dataclass(frozen=True)
class SurrogateSpec:
    """Lattice axes and solver fidelity of a surrogate build."""

    q: tuple = tuple(np.linspace(0.3, 1.0, 5))
    r: tuple = tuple(np.linspace(0.3, 0.95, 6))
    v: tuple = tuple(np.geomspace(0.33, 4.0, 20))
    eps: tuple = (2.04, 2.10, 2.16)
    resolution: float = 28.0
    n_rings: int = 3

    def digest(self) -> str:
        blob = repr((self.q, self.r, self.v, self.eps, self.resolution, self.n_rings)).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def solve_node(q: float, r: float, v: float, eps: float, polarization: str, resolution: float = 28.0,
               n_rings: int = 3):
    """Mode solve at unit pitch with a prescribed silica permittivity.

    Returns ``(n_eff, A_eff / pitch^2)``.
    """
    geom = FiberGeometry(d=q * r, D=r, pitch=1.0, n_rings=n_rings)
    half = (n_rings + 0.5)
    axis = _node_axis(half, 1.0 / resolution)
    quad_axis = axis[len(axis) // 2:]
    fill = air_fraction_quadrant(geom, quad_axis, quad_axis)
    quad = eps + (1.0 - eps) * fill
    lam = 1.0 / v
    profile = IndexProfile(eps=_mirror(quad), x=axis.copy(), y=axis.copy(), eps_background=eps, wavelength_um=lam)
    mode = solve_mode(profile, float(um_to_omega(lam)), polarization)
    return mode.n_eff, effective_area(mode)


def build_surrogate(spec: SurrogateSpec = SurrogateSpec(), path=None, progress=None) -> "Surrogate":
    """Solve every lattice node and optionally save the result as ``.npz``."""
    shape = (len(spec.q), len(spec.r), len(spec.v), len(spec.eps))
    n_eff = {p: np.empty(shape) for p in POLARIZATIONS}
    area = {p: np.empty(shape) for p in POLARIZATIONS}
    t0 = time.time()
    total = 2 * int(np.prod(shape))
    done = 0
    for idx in np.ndindex(*shape):
        iq, ir, iv, ie = idx
        for p in POLARIZATIONS:
            n, a = solve_node(spec.q[iq], spec.r[ir], spec.v[iv], spec.eps[ie], p, spec.resolution, spec.n_rings)
            n_eff[p][idx] = n
            area[p][idx] = a
            done += 1
        if progress is not None and done % 200 == 0:
            progress(done, total, time.time() - t0)
    sur = Surrogate(spec, n_eff, area)
    if path is not None:
        sur.save(path)
    return sur


class Surrogate:
    """Interpolated ``n_eff`` and ``A_eff`` over the scale-invariant lattice."""

    def __init__(self, spec: SurrogateSpec, n_eff: dict, area: dict):
        self.spec = spec
        self.n_eff = n_eff
        self.area = area

    def save(self, path) -> None:
        path = Path(path)
        np.savez_compressed(
            path, q=np.array(self.spec.q), r=np.array(self.spec.r), v=np.array(self.spec.v),
            eps=np.array(self.spec.eps), resolution=self.spec.resolution, n_rings=self.spec.n_rings,
            **{f"n_{p}": self.n_eff[p] for p in POLARIZATIONS}, **{f"a_{p}": self.area[p] for p in POLARIZATIONS})

    @classmethod
    def load(cls, path=None) -> "Surrogate":
        """Load a saved lattice; the default is the one shipped with the package."""
        if path is None:
            with resources.as_file(resources.files("birefpairs") / "data" / SURROGATE_FILE) as p:
                return cls.load(p)
        with np.load(path) as z:
            spec = SurrogateSpec(tuple(z["q"]), tuple(z["r"]), tuple(z["v"]), tuple(z["eps"]),
                                 float(z["resolution"]), int(z["n_rings"]))
            n_eff = {p: z[f"n_{p}"] for p in POLARIZATIONS}
            area = {p: z[f"a_{p}"] for p in POLARIZATIONS}
        return cls(spec, n_eff, area)

    @cached_property
    def _interp(self):
        axes = (np.array(self.spec.q), np.array(self.spec.r), np.log(self.spec.v))
        out = {}
        for p in POLARIZATIONS:
            out[p] = [(RegularGridInterpolator(axes, self.n_eff[p][..., k], method="cubic"),
                       RegularGridInterpolator(axes, np.log(self.area[p][..., k]), method="cubic"))
                      for k in range(len(self.spec.eps))]
        return out

    def _lagrange(self, eps):
        """Interpolation weights over the permittivity slices, shape ``(n_eps, n_points)``."""
        nodes = np.array(self.spec.eps)
        w = np.ones((nodes.size, eps.size))
        for k in range(nodes.size):
            for j in range(nodes.size):
                if j != k:
                    w[k] *= (eps - nodes[j]) / (nodes[k] - nodes[j])
        return w

    def contains(self, geometry: FiberGeometry) -> bool:
        q, r = geometry.d / geometry.D, geometry.D / geometry.pitch
        return (self.spec.q[0] <= q <= self.spec.q[-1]) and (self.spec.r[0] <= r <= self.spec.r[-1])

    def evaluate(self, geometry: FiberGeometry, omega, polarization: str):
        """``(n_eff, A_eff in um^2)`` at the given angular frequencies."""
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        q, r = geometry.d / geometry.D, geometry.D / geometry.pitch
        if not self.contains(geometry):
            raise NumericError(f"geometry outside the surrogate lattice (d/D={q:.3f}, D/pitch={r:.3f})")
        lam = omega_to_um(omega)
        v = geometry.pitch / lam
        if v.min() < self.spec.v[0] or v.max() > self.spec.v[-1]:
            raise NumericError(f"pitch/lambda outside the surrogate lattice [{self.spec.v[0]:.3f}, {self.spec.v[-1]:.3f}]")
        eps = silica_index(lam) ** 2
        if eps.min() < self.spec.eps[0] or eps.max() > self.spec.eps[-1]:
            raise NumericError("silica permittivity outside the surrogate lattice")
        pts = np.column_stack([np.full(v.size, q), np.full(v.size, r), np.log(v)])
        w = self._lagrange(eps)
        n = np.zeros(v.size)
        log_a = np.zeros(v.size)
        for wk, (fn, fa) in zip(w, self._interp[polarization]):
            n += wk * fn(pts)
            log_a += wk * fa(pts)
        return n, np.exp(log_a) * geometry.pitch**2

    def tables(self, geometry: FiberGeometry, omega_grid) -> dict:
        """Dispersion tables for both axes sampled on ``omega_grid``."""
        out = {}
        for p in POLARIZATIONS:
            n, a = self.evaluate(geometry, omega_grid, p)
            out[p] = DispersionTable.from_samples(p, np.asarray(omega_grid, dtype=float), n, a)
        return out


def default_omega_grid(n: int = 64, lam_range=(0.42, 2.3)) -> np.ndarray:
    lo, hi = lam_range
    if not 0 < lo < hi:
        raise ConfigurationError("wavelength range must be ascending and positive")
    return np.linspace(float(um_to_omega(hi)), float(um_to_omega(lo)), n)
