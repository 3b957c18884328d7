"""Fiber cross-section geometry, fused-silica dispersion and index rasterization.

The idealized polarization-maintaining PCF is a triangular lattice of air
holes (diameter ``d``, pitch ``pitch``) in silica with the central hole
removed to form the core. The two holes adjacent to the core along the y
axis are enlarged to diameter ``D``. This squeezes the core along y, so the
y-polarized mode is the fast one and x is the slow axis.

Material dispersion uses the three-term Sellmeier fit of Malitson,
"Interspecimen comparison of the refractive index of fused silica",
J. Opt. Soc. Am. 55, 1205 (1965), valid from 0.21 to 3.71 um at 20 C.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.constants import c

from .errors import ConfigurationError, DomainError

__all__ = [
    "FiberGeometry",
    "MaterialModel",
    "FUSED_SILICA",
    "IndexProfile",
    "silica_index",
    "omega_to_um",
    "um_to_omega",
    "build_profile",
    "hole_centers",
    "load_geometry",
]


def omega_to_um(omega):
    """Vacuum wavelength in um for angular frequency ``omega`` in rad/s."""
    return 2e6 * np.pi * c / np.asarray(omega, dtype=float)


def um_to_omega(wavelength_um):
    """Angular frequency in rad/s for a vacuum wavelength in um."""
    return 2e6 * np.pi * c / np.asarray(wavelength_um, dtype=float)


@dataclass(frozen=True)
class FiberGeometry:
    """Three-parameter PM-PCF cross-section plus fiber length.

    Lengths ``d``, ``D`` and ``pitch`` are in um, ``length`` in m.
    """

    d: float
    D: float
    pitch: float
    length: float = 0.94
    n_rings: int = 4

    def __post_init__(self):
        if min(self.d, self.D, self.pitch, self.length) <= 0:
            raise ConfigurationError(f"geometry values must be positive: {self}")
        if not self.d <= self.D:
            raise ConfigurationError(f"small holes must be smaller than large holes (d={self.d}, D={self.D})")
        if not self.D < self.pitch:
            raise ConfigurationError(f"large holes must be smaller than the pitch (D={self.D}, pitch={self.pitch})")
        if self.n_rings < 3:
            raise ConfigurationError(f"n_rings must be >= 3, got {self.n_rings}")

    def to_dict(self) -> dict:
        return {
            "d_um": self.d,
            "D_um": self.D,
            "pitch_um": self.pitch,
            "length_m": self.length,
            "n_rings": self.n_rings,
        }

    @classmethod
    def from_mapping(cls, mapping) -> "FiberGeometry":
        try:
            return cls(
                d=float(mapping["d_um"]),
                D=float(mapping["D_um"]),
                pitch=float(mapping["pitch_um"]),
                length=float(mapping.get("length_m", 0.94)),
                n_rings=int(mapping.get("n_rings", 4)),
            )
        except KeyError as exc:
            raise ConfigurationError(f"missing geometry key {exc.args[0]!r}") from None
        except ValueError as exc:
            raise ConfigurationError(f"bad geometry value: {exc}") from None


@dataclass(frozen=True)
class MaterialModel:
    """Three-term Sellmeier model ``n^2 = 1 + sum B_k l^2 / (l^2 - C_k)``.

    ``C`` holds squared resonance wavelengths in um^2.
    """

    B: tuple = (0.6961663, 0.4079426, 0.8974794)
    C: tuple = (0.0684043**2, 0.1162414**2, 9.896161**2)
    valid_um: tuple = (0.21, 3.71)

    def __post_init__(self):
        if len(self.B) != 3 or len(self.C) != 3:
            raise ConfigurationError("Sellmeier model needs exactly three terms")


FUSED_SILICA = MaterialModel()


def silica_index(wavelength_um, model: MaterialModel = FUSED_SILICA):
    """Refractive index of the cladding glass at ``wavelength_um``.

    Accepts scalars or arrays. Raises :class:`DomainError` outside the
    model's validity window, which also excludes the Sellmeier poles.
    """
    lam = np.asarray(wavelength_um, dtype=float)
    lo, hi = model.valid_um
    if np.any(~np.isfinite(lam)) or np.any(lam < lo) or np.any(lam > hi):
        raise DomainError(f"wavelength outside Sellmeier validity window [{lo}, {hi}] um: {wavelength_um}")
    lam2 = lam * lam
    n2 = 1.0
    for b, cc in zip(model.B, model.C):
        n2 = n2 + b * lam2 / (lam2 - cc)
    n = np.sqrt(n2)
    return float(n) if n.ndim == 0 else n


@dataclass(frozen=True, eq=False)
class IndexProfile:
    """Rasterized relative permittivity on a node grid symmetric about 0.

    ``eps`` is indexed ``[ix, iy]``. ``x`` and ``y`` are node coordinates in
    um; both contain 0 and are mirror symmetric.
    """

    eps: np.ndarray
    x: np.ndarray
    y: np.ndarray
    eps_background: float
    wavelength_um: float = float("nan")

    def __post_init__(self):
        self.eps.setflags(write=False)
        self.x.setflags(write=False)
        self.y.setflags(write=False)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dy(self) -> float:
        return float(self.y[1] - self.y[0])

    @property
    def extent(self) -> tuple:
        return (float(self.x[-1] - self.x[0]), float(self.y[-1] - self.y[0]))

    @property
    def resolution(self) -> float:
        return 1.0 / self.dx

    def quadrant(self) -> np.ndarray:
        """Permittivity on the ``x >= 0, y >= 0`` nodes."""
        ix0 = len(self.x) // 2
        iy0 = len(self.y) // 2
        return self.eps[ix0:, iy0:]

    def savetxt(self, path) -> None:
        header = (
            f"relative permittivity eps[ix, iy]; dx_um={self.dx!r} dy_um={self.dy!r} "
            f"x0_um={self.x[0]!r} y0_um={self.y[0]!r}"
        )
        np.savetxt(path, self.eps, fmt="%.17g", header=header)


def _node_axis(half_width: float, step: float) -> np.ndarray:
    n = int(np.floor(half_width / step + 1e-9))
    return np.arange(-n, n + 1) * step


def _mirror(quad: np.ndarray) -> np.ndarray:
    full = np.concatenate([quad[:0:-1], quad], axis=0)
    return np.concatenate([full[:, :0:-1], full], axis=1)


def _halfplane_fraction(s, a, b):
    """Fraction of a unit-area pixel on the side ``n.q <= s`` of a line.

    ``a`` and ``b`` are the half-projections ``|n_x| h/2`` and ``|n_y| h/2``.
    """
    a, b = np.maximum(a, b), np.minimum(a, b)
    b = np.maximum(b, 1e-12)
    out = np.empty_like(s)
    lo = s <= -(a + b)
    hi = s >= a + b
    ramp_lo = (~lo) & (s <= -(a - b))
    ramp_hi = (~hi) & (s >= a - b)
    mid = ~(lo | hi | ramp_lo | ramp_hi)
    out[lo] = 0.0
    out[hi] = 1.0
    out[ramp_lo] = (s[ramp_lo] + a[ramp_lo] + b[ramp_lo]) ** 2 / (8 * a[ramp_lo] * b[ramp_lo])
    out[ramp_hi] = 1.0 - (a[ramp_hi] + b[ramp_hi] - s[ramp_hi]) ** 2 / (8 * a[ramp_hi] * b[ramp_hi])
    out[mid] = (s[mid] + a[mid]) / (2 * a[mid])
    return out


def hole_centers(geometry: FiberGeometry, half_x: float, half_y: float):
    """Centers and diameters of all air holes reaching into the window.

    Returns ``(xc, yc, diam)`` arrays. The lattice has columns along y spaced
    by ``pitch * sqrt(3)/2``; the core site at the origin is left solid and
    the two nearest holes on the y axis, at ``(0, +-pitch)``, are enlarged.
    """
    p = geometry.pitch
    col = p * np.sqrt(3.0) / 2.0
    rmax = geometry.D / 2.0
    n_cols = int(np.ceil((half_x + rmax) / col))
    xs, ys, ds = [], [], []
    for n in range(-n_cols, n_cols + 1):
        xc = n * col
        m_lo = int(np.floor((-half_y - rmax) / p - n / 2.0)) - 1
        m_hi = int(np.ceil((half_y + rmax) / p - n / 2.0)) + 1
        for m in range(m_lo, m_hi + 1):
            yc = (m + n / 2.0) * p
            if n == 0 and m == 0:
                continue
            big = n == 0 and abs(m) == 1
            diam = geometry.D if big else geometry.d
            if abs(xc) - diam / 2 > half_x or abs(yc) - diam / 2 > half_y:
                continue
            xs.append(xc)
            ys.append(yc)
            ds.append(diam)
    return np.array(xs), np.array(ys), np.array(ds)


def air_fraction_quadrant(geometry: FiberGeometry, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Area-weighted air fill of each node cell on the ``x, y >= 0`` quadrant."""
    h = float(x[1] - x[0])
    half_x, half_y = float(x[-1]), float(y[-1])
    xc, yc, diam = hole_centers(geometry, half_x, half_y)
    fill = np.zeros((len(x), len(y)))
    for cx, cy, dd in zip(xc, yc, diam):
        r = dd / 2.0
        if cx + r < -h or cy + r < -h:
            continue
        ix = np.nonzero(np.abs(x - cx) <= r + h)[0]
        iy = np.nonzero(np.abs(y - cy) <= r + h)[0]
        if ix.size == 0 or iy.size == 0:
            continue
        X, Y = np.meshgrid(x[ix] - cx, y[iy] - cy, indexing="ij")
        rho = np.hypot(X, Y)
        safe = np.where(rho > 0, rho, 1.0)
        nx = np.where(rho > 0, X / safe, 1.0)
        ny = np.where(rho > 0, Y / safe, 0.0)
        frac = _halfplane_fraction((r - rho) / h, np.abs(nx) / 2, np.abs(ny) / 2)
        fill[np.ix_(ix, iy)] += frac
    return np.minimum(fill, 1.0)


def build_profile(
    geometry: FiberGeometry,
    omega: float,
    resolution: float = 30.0,
    half_width: float | None = None,
    material: MaterialModel = FUSED_SILICA,
) -> IndexProfile:
    """Rasterize the PCF cross-section at angular frequency ``omega``.

    The hole lattice fills the whole square window so no solid jacket is
    present to host cladding modes; the Dirichlet window edge sits inside
    the holey cladding. ``half_width`` defaults to ``(n_rings + 1/2) pitch``.
    """
    if resolution < 20:
        raise ConfigurationError(f"resolution must be >= 20 samples/um, got {resolution}")
    need = geometry.n_rings * geometry.pitch + geometry.D / 2.0
    if half_width is None:
        half_width = (geometry.n_rings + 0.5) * geometry.pitch
    if half_width < need:
        raise ConfigurationError(
            f"window half-width {half_width:.3f} um cannot hold {geometry.n_rings} rings (needs {need:.3f} um)"
        )
    lam = float(omega_to_um(omega))
    eps_si = silica_index(lam, material) ** 2
    axis = _node_axis(half_width, 1.0 / resolution)
    q = axis[len(axis) // 2:]
    fill = air_fraction_quadrant(geometry, q, q)
    quad = eps_si + (1.0 - eps_si) * fill
    return IndexProfile(eps=_mirror(quad), x=axis.copy(), y=axis.copy(), eps_background=eps_si, wavelength_um=lam)


def step_index_profile(core_radius: float, n_core: float, n_clad: float, resolution: float = 40.0,
                       half_width: float | None = None, wavelength_um: float = float("nan")) -> IndexProfile:
    """Circular step-index core with area-weighted boundary cells."""
    if half_width is None:
        half_width = 4.0 * core_radius
    axis = _node_axis(half_width, 1.0 / resolution)
    q = axis[len(axis) // 2:]
    h = float(q[1] - q[0])
    X, Y = np.meshgrid(q, q, indexing="ij")
    rho = np.hypot(X, Y)
    safe = np.where(rho > 0, rho, 1.0)
    frac = _halfplane_fraction((core_radius - rho) / h, np.abs(np.where(rho > 0, X / safe, 1.0)) / 2,
                               np.abs(np.where(rho > 0, Y / safe, 0.0)) / 2)
    quad = n_clad**2 + (n_core**2 - n_clad**2) * frac
    return IndexProfile(eps=_mirror(quad), x=axis.copy(), y=axis.copy(), eps_background=n_clad**2,
                        wavelength_um=wavelength_um)


def uniform_profile(eps: float, resolution: float = 20.0, half_width: float = 3.0,
                    wavelength_um: float = float("nan")) -> IndexProfile:
    axis = _node_axis(half_width, 1.0 / resolution)
    return IndexProfile(eps=np.full((len(axis), len(axis)), float(eps)), x=axis.copy(), y=axis.copy(),
                        eps_background=float(eps), wavelength_um=wavelength_um)


def load_geometry(path) -> FiberGeometry:
    """Read a geometry from an INI file, section ``[geometry]`` or top level."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case sensitive: d_um and D_um differ
    text = path.read_text()
    if not text.lstrip().startswith("["):
        text = "[geometry]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    if "geometry" not in parser:
        raise ConfigurationError(f"{path} has no [geometry] section")
    return FiberGeometry.from_mapping(parser["geometry"])
