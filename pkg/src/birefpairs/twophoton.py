"""Two-photon state: pump envelope, joint spectral amplitudes and projections.

A sheet holds the joint amplitude of one process on a set of rectangular
zones. Each zone is a local ``(omega_s, omega_i)`` grid around one
phase-matched emission band; outside the zones the amplitude is below the
export floor and is treated as zero. Grids built by :func:`auto_grid` use
a signal axis that mirrors the idler axis through ``omega_s = 2 omega_p -
omega_i``, so every idler sample has its energy-conserving partner.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.integrate import trapezoid

from .errors import ConfigurationError, NumericError
from .fibermodel import omega_to_um, um_to_omega
from .modesolver import atomic_write_text, interp_k, interp_n, interp_vg
from .sfwm import (
    PAPER_WINDOW,
    NonlinearContext,
    SpectralWindow,
    find_roots,
    gamma_coefficient,
    get_process,
    nonlinear_phase,
    process_table,
)

log = logging.getLogger(__name__)

C_LIGHT = 299792458.0
# transform-limited Gaussian: time-bandwidth product and peak-to-average factor
TBP_GAUSSIAN = 0.441
GAUSS_SHAPE_FACTOR = 1.0645
N_NODES = 129
DB_FLOOR = -60.0
# envelope cut-off in units of the amplitude width: exp(-3.5^2) = 4.8e-6, well
# below the -60 dB export floor in intensity
ENVELOPE_REACH = 3.5


@dataclass(frozen=True)
class PumpConfig:
    """Pulsed pump settings. Bandwidth in nm, powers in W, angle in degrees."""

    lambda_p_um: float = 0.741
    bandwidth_nm: float = 0.4
    p_avg: float = 0.02
    f_rep: float = 76e6
    theta_p_deg: float = 45.0

    def __post_init__(self):
        if not self.bandwidth_nm > 0:
            raise ConfigurationError(f"pump bandwidth must be > 0 nm, got {self.bandwidth_nm}")
        if not 0 <= self.theta_p_deg <= 90:
            raise ConfigurationError(f"pump angle must lie in [0, 90] degrees, got {self.theta_p_deg}")
        if self.p_avg < 0:
            raise ConfigurationError(f"average power must be >= 0, got {self.p_avg}")
        if not self.f_rep > 0:
            raise ConfigurationError(f"repetition rate must be > 0, got {self.f_rep}")
        if not self.lambda_p_um > 0:
            raise ConfigurationError(f"pump wavelength must be > 0, got {self.lambda_p_um}")

    @property
    def omega_p(self) -> float:
        return float(um_to_omega(self.lambda_p_um))

    @property
    def delta_omega(self) -> float:
        """Intensity FWHM in rad/s."""
        lam = self.lambda_p_um * 1e-6
        return 2 * np.pi * C_LIGHT * self.bandwidth_nm * 1e-9 / lam**2

    @property
    def sigma(self) -> float:
        """Amplitude width ``s`` of ``alpha = exp(-(w - wp)^2 / (2 s^2))``."""
        return self.delta_omega / (2 * np.sqrt(np.log(2)))

    @property
    def pulse_duration(self) -> float:
        """Transform-limited intensity FWHM duration in s."""
        lam = self.lambda_p_um * 1e-6
        return TBP_GAUSSIAN * lam**2 / (C_LIGHT * self.bandwidth_nm * 1e-9)

    @property
    def peak_power(self) -> float:
        return self.p_avg / (self.f_rep * self.pulse_duration * GAUSS_SHAPE_FACTOR)

    def to_dict(self) -> dict:
        return {
            "lambda_p_um": self.lambda_p_um,
            "bandwidth_nm": self.bandwidth_nm,
            "p_avg_W": self.p_avg,
            "f_rep_Hz": self.f_rep,
            "theta_p_deg": self.theta_p_deg,
        }


def pump_alpha(cfg: PumpConfig, omega):
    """Pump amplitude envelope, unit peak, intensity FWHM equal to the bandwidth."""
    u = (np.asarray(omega, dtype=float) - cfg.omega_p) / cfg.sigma
    return np.exp(-0.5 * u * u).astype(complex)


def pump_power_split(cfg: PumpConfig) -> dict:
    """Peak powers ``(p1, p2)`` per process from the pump polarization angle."""
    theta = np.deg2rad(cfg.theta_p_deg)
    p = {"x": cfg.peak_power * np.cos(theta) ** 2, "y": cfg.peak_power * np.sin(theta) ** 2}
    # exact zeros at the axis-aligned settings
    if cfg.theta_p_deg == 0:
        p["y"] = 0.0
    if cfg.theta_p_deg == 90:
        p["x"] = 0.0
    return {proc.label: (p[proc.pump1_pol], p[proc.pump2_pol]) for proc in process_table()}


def nonlinear_context(cfg: PumpConfig, tables, n2: float = 2.6e-20, enabled: bool = True) -> NonlinearContext:
    """Per-process gamma at the pump and peak powers from the polarization split."""
    gamma = {p.label: gamma_coefficient(p, tables, cfg.omega_p, n2) for p in process_table()}
    return NonlinearContext(gamma=gamma, powers=pump_power_split(cfg), enabled=enabled)


def state_weights(cfg: PumpConfig, ctx: NonlinearContext) -> dict:
    """``w_j = eta_j gamma_j sqrt(p1 p2)``; exactly zero without pump power."""
    powers = pump_power_split(cfg)
    out = {}
    for proc in process_table():
        p1, p2 = powers[proc.label]
        out[proc.label] = 0.0 if p1 == 0 or p2 == 0 else proc.eta * ctx.gamma[proc.label] * np.sqrt(p1 * p2)
    return out


# --- grids -----------------------------------------------------------------

@dataclass(frozen=True)
class Zone:
    """One rectangular block of the spectral grid (ascending axes, rad/s)."""

    omega_s: np.ndarray
    omega_i: np.ndarray

    def __post_init__(self):
        for name in ("omega_s", "omega_i"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
                raise ConfigurationError(f"zone {name} must be a strictly ascending 1-D array")
            object.__setattr__(self, name, a)

    @property
    def shape(self):
        return (self.omega_s.size, self.omega_i.size)


def mirrored_zone(omega_i, omega_p) -> Zone:
    """Zone whose signal axis is the energy-conserving mirror of ``omega_i``."""
    omega_i = np.asarray(omega_i, dtype=float)
    return Zone(2 * omega_p - omega_i[::-1], omega_i)


def _derivs(tables, pol, omega):
    return 1.0 / interp_vg(tables[pol], omega)


def band_segments(process, cfg: PumpConfig, tables, ctx, length: float,
                  window: SpectralWindow = PAPER_WINDOW, n_max: int = 1201):
    """Idler intervals ``(lo, hi, step)`` around each phase-matched band.

    The step resolves both the sinc main lobe across the band and the pump
    envelope; the half-width covers the band until the pump envelope has
    decayed below the export floor.
    """
    proc = get_process(process)
    wp, s = cfg.omega_p, cfg.sigma
    roots = find_roots(proc, cfg.lambda_p_um, tables, ctx, window)
    k1p = 0.5 * (_derivs(tables, proc.pump1_pol, wp) + _derivs(tables, proc.pump2_pol, wp))
    out = []
    for wi0 in roots:
        ws0 = 2 * wp - wi0
        d_s = k1p - _derivs(tables, proc.signal_pol, ws0)
        d_i = k1p - _derivs(tables, proc.idler_pol, wi0)
        g = abs(d_i - d_s)
        lobe = 2 * np.pi / (length * g) if g > 0 else np.inf
        t = np.array([-d_i, d_s]) / np.hypot(d_i, d_s)
        rate = abs(t[0] + t[1])
        span = 2 * ENVELOPE_REACH * s
        reach = min(span / rate if rate > 0 else np.inf, 100 * s)
        half = reach * max(abs(t[0]), abs(t[1])) + span + 2 * min(lobe, 50 * s)
        step = min(lobe / 2.5, s / 2)
        if 2 * half / step + 1 > n_max:
            step = 2 * half / (n_max - 1)
            log.info("process %s band at %.4f um: grid step coarsened to %.3g rad/s",
                     proc.label, float(omega_to_um(wi0)), step)
        out.append((wi0 - half, wi0 + half, step))
    return out


def _merge(segments, gap):
    segs = sorted(segments)
    merged = []
    for lo, hi, h in segs:
        if merged and lo <= merged[-1][1] + gap:
            plo, phi, ph = merged[-1]
            merged[-1] = (plo, max(phi, hi), min(ph, h))
        else:
            merged.append((lo, hi, h))
    return merged


def auto_grid(processes, cfg: PumpConfig, tables, ctx, length: float,
              window: SpectralWindow = PAPER_WINDOW, n_max: int = 1201) -> tuple:
    """Mirrored zones covering every phase-matched band of ``processes``.

    Bands closer than the pump-envelope reach are merged into one zone, so
    off-zone blocks carry no amplitude.
    """
    segs = []
    for p in processes:
        segs.extend(band_segments(p, cfg, tables, ctx, length, window, n_max))
    if not segs:
        return ()
    lo_t = max(t.omega_range[0] for t in tables.values())
    hi_t = min(t.omega_range[1] for t in tables.values())
    wp = cfg.omega_p
    zones = []
    for lo, hi, h in _merge(segs, 2 * ENVELOPE_REACH * cfg.sigma):
        lo = max(lo, lo_t, 2 * wp - hi_t)
        hi = min(hi, hi_t, 2 * wp - lo_t)
        n = int(np.ceil((hi - lo) / h)) + 1
        if hi <= lo or n < 2:
            continue
        zones.append(mirrored_zone(np.linspace(lo, hi, n), wp))
    return tuple(zones)


# --- joint spectral amplitude ----------------------------------------------

def _ell(tables, pol, omega):
    """``l(w) = sqrt(w) / (n(w) sqrt(v_g(w)))``."""
    return np.sqrt(omega) / (interp_n(tables[pol], omega) * np.sqrt(interp_vg(tables[pol], omega)))


def _sinc_phase(X):
    """``sinc(X) exp(iX) = (exp(2iX) - 1) / (2iX)``, series form near zero."""
    small = np.abs(X) < 1e-4
    Xs = np.where(small, 1.0, X)
    out = np.expm1(2j * Xs) / (2j * Xs)
    if small.any():
        out = np.where(small, 1 + 1j * X - (2.0 / 3.0) * X * X, out)
    return out


def _zone_amplitude(proc, cfg, tables, ctx, length, zone: Zone, n_nodes, exact_within):
    """Evaluate the pump-convolution integral on one zone.

    With ``w = Sigma/2 + delta`` the Gaussian envelope product separates into
    ``exp(-(Sigma/2 - wp)^2/s^2) exp(-delta^2/s^2)``. The pump-pair phase
    ``K(Sigma, delta) = k1(Sigma/2 + delta) + k2(Sigma/2 - delta)`` is
    tabulated on a fine ``Sigma`` lattice and interpolated linearly.

    Writing ``X_n = X0 + a_n`` with ``X0`` the phase at ``delta = 0``, points
    with ``|X0| >= exact_within`` use the expansion of
    ``(exp(2iX) - 1) / (2iX)`` to second order in ``a_n / X0``; the full
    quadrature is used elsewhere. ``exact_within=None`` picks
    ``max(64, 20 max|a_n|)``, which bounds the relative error near 1e-3;
    ``inf`` disables the expansion.
    """
    wp, s = cfg.omega_p, cfg.sigma
    ws, wi = zone.omega_s, zone.omega_i
    F = np.zeros(zone.shape, dtype=complex)
    sig = ws[:, None] + wi[None, :]
    u = 0.5 * sig - wp
    rows, cols = np.nonzero(np.abs(u) < ENVELOPE_REACH * s)
    if rows.size == 0:
        return F
    kap = (interp_k(tables[proc.signal_pol], ws)[rows] + interp_k(tables[proc.idler_pol], wi)[cols])
    phi = nonlinear_phase(ctx, proc)

    x, wts = np.polynomial.legendre.leggauss(n_nodes)
    delta = 4 * s * x
    wts = 4 * s * wts * np.exp(-(delta / s) ** 2)
    sig_pts = sig[rows, cols]
    s_lo, s_hi = sig_pts.min(), sig_pts.max()
    n_tab = 4097 if s_hi > s_lo else 2
    sig_tab = np.linspace(s_lo, s_hi, n_tab)
    K0 = (interp_k(tables[proc.pump1_pol], 0.5 * sig_tab) + interp_k(tables[proc.pump2_pol], 0.5 * sig_tab))
    A = 0.5 * length * (interp_k(tables[proc.pump1_pol], 0.5 * sig_tab[:, None] + delta[None, :])
                        + interp_k(tables[proc.pump2_pol], 0.5 * sig_tab[:, None] - delta[None, :])
                        - K0[:, None])
    spread = float(np.max(np.abs(A)))
    if exact_within is None:
        exact_within = max(64.0, 20.0 * spread)

    step = sig_tab[1] - sig_tab[0]
    pos = (sig_pts - s_lo) / step if step > 0 else np.zeros(sig_pts.size)
    j0 = np.clip(np.floor(pos).astype(int), 0, n_tab - 2)
    frac = pos - j0

    def lerp(tab):
        if tab.ndim == 1:
            return tab[j0] * (1 - frac) + tab[j0 + 1] * frac
        return tab[j0] * (1 - frac[:, None]) + tab[j0 + 1] * frac[:, None]

    x0 = 0.5 * length * (lerp(K0) - kap - phi)
    env = np.exp(-(u[rows, cols] / s) ** 2)
    vals = np.empty(rows.size, dtype=complex)

    far = np.abs(x0) >= exact_within
    if far.any():
        e2a = np.exp(2j * A)
        c1, c1p = e2a @ wts, (e2a * A) @ wts
        c0, c0p = wts.sum(), A @ wts
        j, f, X = j0[far], frac[far], x0[far]
        C1 = c1[j] * (1 - f) + c1[j + 1] * f
        C1p = c1p[j] * (1 - f) + c1p[j + 1] * f
        C0p = c0p[j] * (1 - f) + c0p[j + 1] * f
        vals[far] = (np.exp(2j * X) * (C1 / X - C1p / X**2) - (c0 / X - C0p / X**2)) / 2j

    near = np.nonzero(~far)[0]
    chunk = 8192
    for a in range(0, near.size, chunk):
        idx = near[a:a + chunk]
        aa = A[j0[idx]] * (1 - frac[idx, None]) + A[j0[idx] + 1] * frac[idx, None]
        vals[idx] = _sinc_phase(x0[idx, None] + aa) @ wts
    F[rows, cols] = env * vals
    return F


@dataclass
class JointSpectrum:
    """Joint amplitude of one process over a set of zones.

    ``F`` holds the pump-convolution amplitude per zone; ``ell_s``/``ell_i``
    hold the ``l`` prefactors when ``g_scaled`` is set, and :attr:`G` applies
    them.
    """

    process: object
    zones: tuple
    F: list
    g_scaled: bool = True
    ell_s: list = field(default_factory=list)
    ell_i: list = field(default_factory=list)
    length: float = 0.94
    omega_p: float = 0.0

    @property
    def G(self) -> list:
        if not self.g_scaled:
            return self.F
        return [f * ls[:, None] * li[None, :] for f, ls, li in zip(self.F, self.ell_s, self.ell_i)]

    @property
    def intensity(self) -> list:
        return [np.abs(g) ** 2 for g in self.G]

    @property
    def is_empty(self) -> bool:
        return all(not np.any(f) for f in self.F)

    @property
    def omega_s(self) -> np.ndarray:
        return np.concatenate([z.omega_s for z in self.zones])

    @property
    def omega_i(self) -> np.ndarray:
        return np.concatenate([z.omega_i for z in self.zones])

    def dense(self, values=None) -> tuple:
        """Assemble zones into one matrix over the sorted, concatenated axes."""
        values = self.intensity if values is None else values
        ws, wi = self.omega_s, self.omega_i
        os_, oi = np.argsort(ws), np.argsort(wi)
        out = np.zeros((ws.size, wi.size), dtype=np.result_type(*values))
        r = c = 0
        for z, v in zip(self.zones, values):
            out[r:r + z.shape[0], c:c + z.shape[1]] = v
            r += z.shape[0]
            c += z.shape[1]
        return ws[os_], wi[oi], out[np.ix_(os_, oi)]


def jsa(process, cfg: PumpConfig, tables, ctx: NonlinearContext | None, grid=None, length: float = 0.94,
        g_scaled: bool = True, n_nodes: int = N_NODES, exact_within: float | None = None,
        window: SpectralWindow = PAPER_WINDOW) -> JointSpectrum:
    """Joint spectral amplitude of one process.

    ``grid`` is a :class:`Zone`, a sequence of zones, or ``None`` for zones
    around the process's own phase-matched bands. Far from the band, where
    the centre phase ``|L dk / 2|`` exceeds ``exact_within``, the pump
    integral uses a large-phase expansion (see :func:`_zone_amplitude`).
    """
    proc = get_process(process)
    if length <= 0:
        raise ConfigurationError(f"fiber length must be > 0, got {length}")
    if grid is None:
        grid = auto_grid([proc], cfg, tables, ctx, length, window)
    zones = (grid,) if isinstance(grid, Zone) else tuple(grid)
    F, ls, li = [], [], []
    for z in zones:
        F.append(_zone_amplitude(proc, cfg, tables, ctx, length, z, n_nodes, exact_within))
        ls.append(_ell(tables, proc.signal_pol, z.omega_s))
        li.append(_ell(tables, proc.idler_pol, z.omega_i))
    return JointSpectrum(proc, zones, F, g_scaled, ls, li, length, cfg.omega_p)


def _cell_widths(axis):
    return np.gradient(axis) if axis.size > 1 else np.ones(1)


def marginal_idler(sheet: JointSpectrum, normalize: bool = False):
    """``I(w_i) = int |G|^2 dw_s`` by the trapezoid rule; returns ``(omega_i, I)``."""
    wi = sheet.omega_i
    vals = np.concatenate([trapezoid(I, z.omega_s, axis=0) for z, I in zip(sheet.zones, sheet.intensity)])
    order = np.argsort(wi)
    wi, vals = wi[order], vals[order]
    if normalize and vals.max() > 0:
        vals = vals / vals.max()
    return wi, vals


def marginal_signal(sheet: JointSpectrum, normalize: bool = False):
    """``I(w_s) = int |G|^2 dw_i``; returns ``(omega_s, I)``."""
    ws = sheet.omega_s
    vals = np.concatenate([trapezoid(I, z.omega_i, axis=1) for z, I in zip(sheet.zones, sheet.intensity)])
    order = np.argsort(ws)
    ws, vals = ws[order], vals[order]
    if normalize and vals.max() > 0:
        vals = vals / vals.max()
    return ws, vals


def jsi(sheet: JointSpectrum, normalize: str | None = None) -> list:
    """Per-zone ``|G|^2``; ``normalize`` is ``"integral"``, ``"max"`` or ``None``."""
    I = sheet.intensity
    if normalize == "integral":
        total = sum(trapezoid(trapezoid(v, z.omega_i, axis=1), z.omega_s) for z, v in zip(sheet.zones, I))
        I = [v / total for v in I]
    elif normalize == "max":
        peak = max(v.max() for v in I)
        I = [v / peak for v in I]
    elif normalize is not None:
        raise ConfigurationError(f"unknown normalization {normalize!r}")
    return I


# --- state -----------------------------------------------------------------

@dataclass
class TwoPhotonState:
    """Per-process sheets on one shared grid with weights ``w_j``; Gamma = 1."""

    sheets: dict
    weights: dict
    zones: tuple
    pump: PumpConfig
    tables: dict = field(default_factory=dict, repr=False)
    ctx: NonlinearContext | None = None
    length: float = 0.94
    g_scaled: bool = True
    gamma_scale: float = 1.0

    @property
    def active(self) -> list:
        return [k for k in sorted(self.sheets) if self.weights[k] > 0]

    def weighted(self, label) -> list:
        w = self.weights[label]
        return [w * g for g in self.sheets[label].G]

    @property
    def omega_i(self) -> np.ndarray:
        return np.concatenate([z.omega_i for z in self.zones])

    def relative_rates(self) -> dict:
        """Pair rate per process from normalized JSAs: proportional to ``w_j^2``."""
        return {k: self.weights[k] ** 2 for k in sorted(self.sheets)}


def assemble_state(cfg: PumpConfig, geometry, tables, ctx: NonlinearContext, grid=None,
                   g_scaled: bool = True, window: SpectralWindow = PAPER_WINDOW) -> TwoPhotonState:
    """All six sheets on a common grid, with their weights.

    Zero-weight processes get all-zero sheets and are not integrated. The
    default grid covers the bands of every active process.
    """
    length = geometry.length if hasattr(geometry, "length") else float(geometry)
    weights = state_weights(cfg, ctx)
    active = [p for p in process_table() if weights[p.label] > 0]
    if grid is None:
        grid = auto_grid(active, cfg, tables, ctx, length, window)
    zones = (grid,) if isinstance(grid, Zone) else tuple(grid)
    sheets = {}
    for p in process_table():
        if weights[p.label] > 0:
            sheets[p.label] = jsa(p, cfg, tables, ctx, zones, length, g_scaled)
        else:
            sheets[p.label] = JointSpectrum(
                p, zones, [np.zeros(z.shape, dtype=complex) for z in zones], False, [], [], length, cfg.omega_p)
    return TwoPhotonState(sheets, weights, zones, cfg, tables, ctx, length, g_scaled)


def _channels(state, key):
    groups = {}
    for label in state.active:
        proc = get_process(label)
        groups.setdefault(key(proc), []).append(label)
    return groups


def jsi_total(state: TwoPhotonState, coherent: bool = True) -> list:
    """Total JSI per zone, unit global maximum.

    Amplitudes add coherently within a (signal, idler) polarization channel
    and incoherently across channels; ``coherent=False`` adds every process
    incoherently.
    """
    total = [np.zeros(z.shape) for z in state.zones]
    key = (lambda p: p.channel) if coherent else (lambda p: p.label)
    for labels in _channels(state, key).values():
        for k in range(len(state.zones)):
            amp = sum(state.weighted(lab)[k] for lab in labels)
            total[k] += np.abs(amp) ** 2
    peak = max((t.max() for t in total), default=0.0)
    if peak > 0:
        total = [t / peak for t in total]
    return total


def joint_prob(state: TwoPhotonState, theta_deg, omega_i=None, coherent: bool = True,
               analyzer: str = "signal", db: bool = False):
    """Polarization-resolved idler spectrum ``P(theta, omega_i)``.

    A polarizer at ``theta`` (from the slow axis) acts on the ``analyzer``
    photon (``"signal"`` by default); the other photon's polarization is
    traced out and the signal frequency integrated. Returns
    ``(omega_i, P)`` with ``P`` of shape ``(len(theta), len(omega_i))``,
    unit global maximum, or in dB clipped at -60 when ``db`` is set.
    """
    if analyzer not in ("signal", "idler"):
        raise ConfigurationError("analyzer must be 'signal' or 'idler'")
    if omega_i is not None:
        state = regrid(state, omega_i)
    theta = np.deg2rad(np.atleast_1d(np.asarray(theta_deg, dtype=float)))
    analyzed = (lambda p: p.signal_pol) if analyzer == "signal" else (lambda p: p.idler_pol)
    traced = (lambda p: p.idler_pol) if analyzer == "signal" else (lambda p: p.signal_pol)

    wi_all = state.omega_i
    n_i = wi_all.size
    if coherent:
        groups = _channels(state, traced)
    else:
        groups = {lab: [lab] for lab in state.active}
    cc = np.zeros(n_i)
    ss = np.zeros(n_i)
    cs = np.zeros(n_i)
    col = 0
    for k, z in enumerate(state.zones):
        sl = slice(col, col + z.shape[1])
        for labels in groups.values():
            A = sum((state.weighted(l)[k] for l in labels if analyzed(get_process(l)) == "x"),
                    np.zeros(z.shape, complex))
            B = sum((state.weighted(l)[k] for l in labels if analyzed(get_process(l)) == "y"),
                    np.zeros(z.shape, complex))
            cc[sl] += trapezoid(np.abs(A) ** 2, z.omega_s, axis=0)
            ss[sl] += trapezoid(np.abs(B) ** 2, z.omega_s, axis=0)
            cs[sl] += trapezoid(2 * np.real(A * np.conj(B)), z.omega_s, axis=0)
        col += z.shape[1]
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    P = c * c * cc + s * s * ss + c * s * cs
    P = np.clip(P, 0.0, None)
    order = np.argsort(wi_all)
    P = P[:, order]
    peak = P.max()
    if peak > 0:
        P = P / peak
    if db:
        P = to_db(P)
    return wi_all[order], P


def to_db(values, floor: float = DB_FLOOR):
    with np.errstate(divide="ignore"):
        out = 10 * np.log10(np.asarray(values, dtype=float))
    return np.maximum(out, floor)


def regrid(state: TwoPhotonState, omega_i) -> TwoPhotonState:
    """Recompute a state on one mirrored zone with the given idler axis."""
    zone = mirrored_zone(np.sort(np.asarray(omega_i, dtype=float)), state.pump.omega_p)
    return assemble_state(state.pump, state.length, state.tables, state.ctx, (zone,), state.g_scaled)


# --- orientation -----------------------------------------------------------

class OrientationError(NumericError):
    """Second-moment matrix is isotropic; no ridge direction exists."""


def _moment_angle(ws, wi, I, isotropy=0.9):
    W = I * _cell_widths(ws)[:, None] * _cell_widths(wi)[None, :]
    m = W.sum()
    if m <= 0:
        raise OrientationError("empty intensity")
    S, Iw = np.meshgrid(ws, wi, indexing="ij")
    ms, mi = (W * S).sum() / m, (W * Iw).sum() / m
    ds, di = S - ms, Iw - mi
    cov = np.array([[(W * ds * ds).sum(), (W * ds * di).sum()],
                    [(W * ds * di).sum(), (W * di * di).sum()]]) / m
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 0 or evals[0] / evals[1] > isotropy:
        raise OrientationError(f"isotropic second moment (eigenvalue ratio {evals[0] / max(evals[1], 1e-300):.3f})")
    v = evecs[:, 1]
    ang = np.degrees(np.arctan2(v[1], v[0]))
    if ang <= -90:
        ang += 180
    elif ang > 90:
        ang -= 180
    return float(ang)


def ridge_components(sheet: JointSpectrum, threshold: float = 1e-3, bridge: int = 3) -> list:
    """Connected regions of the JSI above ``threshold`` times its maximum.

    Sinc side lobes are separated from the main ridge by one-pixel zero
    lines, so the mask is dilated ``bridge`` times before labelling; pixels
    keep the label of the dilated region they fall in. Returns a list of
    ``(omega_s, omega_i, intensity)`` sub-blocks, one per component, with
    intensity zeroed outside the component.
    """
    I = sheet.intensity
    peak = max(v.max() for v in I)
    out = []
    if peak <= 0:
        return out
    for z, v in zip(sheet.zones, I):
        above = v >= threshold * peak
        grown = ndimage.binary_dilation(above, structure=np.ones((3, 3)), iterations=bridge) if bridge else above
        lab, n = ndimage.label(grown, structure=np.ones((3, 3)))
        lab = np.where(above, lab, 0)
        for k in range(1, n + 1):
            mask = lab == k
            r = np.nonzero(mask.any(axis=1))[0]
            c = np.nonzero(mask.any(axis=0))[0]
            blk = np.where(mask, v, 0.0)[r[0]:r[-1] + 1, c[0]:c[-1] + 1]
            out.append((z.omega_s[r[0]:r[-1] + 1], z.omega_i[c[0]:c[-1] + 1], blk))
    return out


def jsi_orientation(sheet: JointSpectrum, threshold: float = 1e-3) -> float:
    """Ridge angle ``theta_si`` in degrees, measured from the ``omega_s`` axis.

    Uses the principal eigenvector of the intensity-weighted second moment of
    the single component above ``threshold``. Multi-zone sheets must be
    split first with :func:`ridge_components` / :func:`jsi_orientations`.
    """
    comps = ridge_components(sheet, threshold)
    if len(comps) != 1:
        raise OrientationError(f"sheet has {len(comps)} ridge components; use jsi_orientations")
    return _moment_angle(*comps[0])


def jsi_orientations(sheet: JointSpectrum, threshold: float = 1e-3) -> list:
    """``theta_si`` for every connected ridge, ordered by idler frequency."""
    comps = sorted(ridge_components(sheet, threshold), key=lambda c: c[1][0])
    return [_moment_angle(*c) for c in comps]


def peak_center(omega, values) -> float:
    """Peak position refined by the vertex of a parabola through the top three samples."""
    omega = np.asarray(omega, dtype=float)
    values = np.asarray(values, dtype=float)
    k = int(np.argmax(values))
    if k == 0 or k == values.size - 1:
        return float(omega[k])
    x = omega[k - 1:k + 2]
    y = values[k - 1:k + 2]
    a, b, _ = np.polyfit(x - x[1], y, 2)
    if a >= 0:
        return float(omega[k])
    return float(x[1] - b / (2 * a))


def contour_angle(branch, lambda_p_um: float, omega_i: float | None = None) -> float:
    """``theta_pm`` in degrees: contour tangent in ``(omega_p, omega_s - omega_p)``.

    Central finite difference on the traced branch at the point nearest to
    ``lambda_p_um`` (and to ``omega_i`` when the branch crosses that pump
    wavelength more than once).
    """
    om = branch.omega
    wp = om[:, 0]
    dwp = np.gradient(wp)
    dws = np.gradient(om[:, 1] - wp)
    dist = np.abs(wp - um_to_omega(lambda_p_um))
    if omega_i is not None:
        dist = dist + np.abs(om[:, 2] - omega_i)
    k = int(np.argmin(dist))
    lo, hi = max(k - 2, 0), min(k + 2, len(wp) - 1)
    ang = np.degrees(np.arctan2(dws[lo:hi + 1].mean(), dwp[lo:hi + 1].mean()))
    if ang <= -90:
        ang += 180
    elif ang > 90:
        ang -= 180
    return float(ang)


# --- export ----------------------------------------------------------------

def export_matrix(stem, matrix, rows, cols, row_name: str, col_name: str, quantity: str,
                  db: bool = False, extra: dict | None = None) -> tuple:
    """Write ``stem.csv`` (matrix, header lines carry units) and ``stem.json`` axes."""
    values = to_db(matrix) if db else np.asarray(matrix)
    lines = [f"# quantity={quantity}{' (dB, floor %g)' % DB_FLOOR if db else ''}",
             f"# rows={row_name}; cols={col_name}"]
    lines += [",".join(repr(float(v)) for v in row) for row in values]
    csv_path, json_path = f"{stem}.csv", f"{stem}.json"
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    meta = {
        "quantity": quantity,
        "scale": "dB" if db else "linear",
        "db_floor": DB_FLOOR if db else None,
        "rows": {"name": row_name, "values": [float(v) for v in rows]},
        "cols": {"name": col_name, "values": [float(v) for v in cols]},
    }
    if extra:
        meta.update(extra)
    atomic_write_text(json_path, json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return csv_path, json_path


def read_matrix(csv_path) -> np.ndarray:
    return np.loadtxt(csv_path, delimiter=",", comments="#", ndmin=2)


def export_marginal(path, omega, values, quantity: str = "idler marginal") -> str:
    lines = [f"# quantity={quantity}", "# units: omega rad/s, lambda um, relative intensity",
             "omega_rad_s,lambda_um,intensity"]
    for w, v in zip(omega, values):
        lines.append(f"{float(w)!r},{float(omega_to_um(w))!r},{float(v)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
    return str(path)
