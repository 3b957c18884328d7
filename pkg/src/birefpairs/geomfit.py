"""Inverse fit of the fiber cross-section from measured emission peaks.

The fitness of a candidate geometry is the sum of squared phase mismatches
over the observed ``(pump, idler)`` peaks, each assigned to the compatible
process that mismatches least. A real-coded genetic algorithm minimizes it
and an exhaustive lattice search serves as an oracle.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BirefPairsError, ConfigurationError
from .fibermodel import FiberGeometry, omega_to_um, um_to_omega
from .modesolver import POLARIZATIONS, DispersionCache, atomic_write_text, dispersion_scan, interp_vg
from .sfwm import PAPER_WINDOW, NonlinearContext, SpectralWindow, delta_k, find_roots, get_process, process_table
from .surrogate import Surrogate, default_omega_grid

log = logging.getLogger(__name__)

PARAMS = ("d", "D", "pitch")
DEFAULT_BOUNDS = {"d": (0.4, 1.1), "D": (0.5, 1.3), "pitch": (0.8, 1.6)}
# minimum separation kept between d, D and pitch by the repair step (um)
ORDER_MARGIN = 1e-3
OBS_COLUMNS = ("lambda_p_um", "lambda_i_um", "bandwidth_nm", "idler_pol", "theta_p_deg", "process_hint")


class InconsistentObservationError(ConfigurationError):
    """No process can produce the observed idler under the stated pump setting."""


@dataclass(frozen=True)
class PeakObservation:
    lambda_p_um: float
    lambda_i_um: float
    bandwidth_nm: float
    idler_pol: str
    theta_p_deg: float
    process_hint: str | None = None

    def __post_init__(self):
        if not self.lambda_i_um < self.lambda_p_um:
            raise ConfigurationError(
                f"idler must be bluer than the pump: lambda_i={self.lambda_i_um} >= lambda_p={self.lambda_p_um}")
        if not self.bandwidth_nm > 0:
            raise ConfigurationError(f"bandwidth must be > 0 nm, got {self.bandwidth_nm}")
        if self.idler_pol not in POLARIZATIONS:
            raise ConfigurationError(f"idler polarization must be 'x' or 'y', got {self.idler_pol!r}")
        if not 0 <= self.theta_p_deg <= 90:
            raise ConfigurationError(f"pump angle must lie in [0, 90], got {self.theta_p_deg}")
        if self.process_hint in ("", None):
            object.__setattr__(self, "process_hint", None)
        else:
            object.__setattr__(self, "process_hint", get_process(self.process_hint).label)

    @property
    def omegas(self):
        """``(omega_p, omega_s, omega_i)`` with ``omega_s = 2 omega_p - omega_i``."""
        wp = float(um_to_omega(self.lambda_p_um))
        wi = float(um_to_omega(self.lambda_i_um))
        return wp, 2 * wp - wi, wi


def compatible_processes(obs: PeakObservation) -> tuple:
    """Processes pumped at ``theta_p`` whose idler polarization matches the peak."""
    has = {"x": obs.theta_p_deg < 90, "y": obs.theta_p_deg > 0}
    out = tuple(p for p in process_table()
                if has[p.pump1_pol] and has[p.pump2_pol] and p.idler_pol == obs.idler_pol)
    if obs.process_hint is not None:
        out = tuple(p for p in out if p.label == obs.process_hint)
    if not out:
        raise InconsistentObservationError(
            f"no process fits idler_pol={obs.idler_pol} at theta_p={obs.theta_p_deg} deg"
            + (f" with hint {obs.process_hint}" if obs.process_hint else ""))
    return out


# --- forward models --------------------------------------------------------

class SurrogateModel:
    """Dispersion tables from the scale-invariant surrogate (fast tier)."""

    name = "surrogate"

    def __init__(self, surrogate: Surrogate | None = None, omega_grid=None):
        self.surrogate = surrogate if surrogate is not None else Surrogate.load()
        self.omega_grid = default_omega_grid() if omega_grid is None else np.asarray(omega_grid, dtype=float)

    def __call__(self, geometry: FiberGeometry) -> dict:
        return self.surrogate.tables(geometry, self.omega_grid)

    def describe(self) -> dict:
        return {"model": self.name, "lattice": self.surrogate.spec.digest(),
                "omega_range": [float(self.omega_grid[0]), float(self.omega_grid[-1])],
                "n_samples": int(self.omega_grid.size)}


class DirectModel:
    """Dispersion tables from full mode-solver scans (slow tier, cache-aware)."""

    name = "direct"

    def __init__(self, lam_range=(0.42, 2.3), n_samples: int = 24, resolution: float = 30.0,
                 cache: DispersionCache | None = None):
        self.omega_range = (float(um_to_omega(lam_range[1])), float(um_to_omega(lam_range[0])))
        self.n_samples = n_samples
        self.resolution = resolution
        self.cache = cache

    def __call__(self, geometry: FiberGeometry) -> dict:
        if self.cache is not None:
            return self.cache.pair(geometry, self.omega_range, self.n_samples, self.resolution)
        return {p: dispersion_scan(geometry, self.omega_range, self.n_samples, p, self.resolution)
                for p in POLARIZATIONS}

    def describe(self) -> dict:
        return {"model": self.name, "omega_range": list(self.omega_range), "n_samples": self.n_samples,
                "resolution": self.resolution}


# --- fitness ---------------------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    observation: PeakObservation
    process: str | None
    residual: float

    def to_dict(self) -> dict:
        return {"lambda_p_um": self.observation.lambda_p_um, "lambda_i_um": self.observation.lambda_i_um,
                "idler_pol": self.observation.idler_pol, "process": self.process, "residual": self.residual}


@dataclass(frozen=True)
class FitnessValue:
    total: float
    assignments: tuple


def fitness_from_tables(tables, observations, ctx: NonlinearContext | None = None,
                        weighted: bool = False) -> FitnessValue:
    """Sum of squared minimum mismatches (rad^2/m^2) for given dispersion tables.

    ``weighted`` divides each residual by the mismatch spanned by the peak's
    bandwidth, ``|d dk / d omega_i| * delta omega_i``.
    """
    total = 0.0
    out = []
    for obs in observations:
        wp, ws, wi = obs.omegas
        best = None
        for proc in compatible_processes(obs):
            r = float(delta_k(proc, wp, ws, wi, tables, ctx))
            if weighted:
                slope = abs(1.0 / interp_vg(tables[proc.signal_pol], ws) - 1.0 / interp_vg(tables[proc.idler_pol], wi))
                dwi = 2 * math.pi * 299792458.0 * obs.bandwidth_nm * 1e-9 / (obs.lambda_i_um * 1e-6) ** 2
                r = r / max(float(slope) * dwi, 1e-300)
            if best is None or abs(r) < abs(best[1]):
                best = (proc.label, r)
        total += best[1] ** 2
        out.append(Assignment(obs, best[0], best[1]))
    return FitnessValue(total, tuple(out))


def fitness(geometry: FiberGeometry, observations, model=None, ctx: NonlinearContext | None = None,
            weighted: bool = False) -> FitnessValue:
    """Fitness of one candidate; solver failures give ``+inf`` rather than raising."""
    if not observations:
        raise ConfigurationError("at least one observation is required")
    for obs in observations:
        compatible_processes(obs)
    model = model if model is not None else SurrogateModel()
    try:
        tables = model(geometry)
        return fitness_from_tables(tables, observations, ctx, weighted)
    except BirefPairsError as exc:
        log.info("candidate %s rejected: %s", geometry.to_dict(), exc)
        return FitnessValue(math.inf, tuple(Assignment(o, None, math.inf) for o in observations))


def synthesize_observations(geometry: FiberGeometry, pump_wavelengths_um, model=None, theta_p_deg: float = 45.0,
                            window: SpectralWindow = PAPER_WINDOW, bandwidth_nm: float = 1.0,
                            with_hints: bool = False) -> list:
    """Peaks lying exactly on the ``delta_k = 0`` contours of ``geometry``.

    One observation per root of every pumped process in ``window``.
    """
    model = model if model is not None else SurrogateModel()
    tables = model(geometry)
    has = {"x": theta_p_deg < 90, "y": theta_p_deg > 0}
    out = []
    for lp in pump_wavelengths_um:
        for proc in process_table():
            if not (has[proc.pump1_pol] and has[proc.pump2_pol]):
                continue
            for wi in find_roots(proc, lp, tables, None, window):
                out.append(PeakObservation(float(lp), float(omega_to_um(wi)), bandwidth_nm, proc.idler_pol,
                                           theta_p_deg, proc.label if with_hints else None))
    return out


# --- genetic algorithm -----------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    population: int = 48
    generations: int = 120
    tournament: int = 3
    crossover_rate: float = 0.9
    blend_alpha: float = 0.5
    mutation_sigma: dict | None = None
    elites: int = 2
    seed: int = 0
    stall_generations: int = 30
    stall_tol: float = 1e-4
    length: float = 0.94
    weighted: bool = False

    def __post_init__(self):
        if set(self.bounds) != set(PARAMS):
            raise ConfigurationError(f"bounds must cover exactly {PARAMS}")
        for k, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ConfigurationError(f"bound for {k} must satisfy lower < upper, got ({lo}, {hi})")
            if lo <= 0:
                raise ConfigurationError(f"bound for {k} must be positive")
        if self.population < 8:
            raise ConfigurationError(f"population must be >= 8, got {self.population}")
        if not 0 <= self.elites < self.population:
            raise ConfigurationError("elite count must be in [0, population)")
        if self.tournament < 1 or self.generations < 1:
            raise ConfigurationError("tournament size and generation cap must be >= 1")
        if not 0 <= self.crossover_rate <= 1:
            raise ConfigurationError("crossover rate must lie in [0, 1]")

    @property
    def sigmas(self) -> np.ndarray:
        if self.mutation_sigma is not None:
            return np.array([self.mutation_sigma[k] for k in PARAMS], dtype=float)
        return np.array([0.01 * (self.bounds[k][1] - self.bounds[k][0]) for k in PARAMS])

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.bounds[k][0] for k in PARAMS], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.bounds[k][1] for k in PARAMS], dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = {k: list(v) for k, v in self.bounds.items()}
        return d


def _isotonic(y):
    """Least-squares non-decreasing fit (pool adjacent violators)."""
    blocks = [[float(v), 1] for v in y]
    i = 0
    while i < len(blocks) - 1:
        if blocks[i][0] > blocks[i + 1][0]:
            v = (blocks[i][0] * blocks[i][1] + blocks[i + 1][0] * blocks[i + 1][1]) / (blocks[i][1] + blocks[i + 1][1])
            blocks[i] = [v, blocks[i][1] + blocks[i + 1][1]]
            del blocks[i + 1]
            i = max(i - 1, 0)
        else:
            i += 1
    return np.concatenate([[v] * n for v, n in blocks])


def repair(x, lower, upper, margin: float = ORDER_MARGIN) -> np.ndarray:
    """Project onto ``lower <= x <= upper`` with ``d + m <= D`` and ``D + m <= pitch``.

    Alternates the ordering projection (isotonic regression on shifted
    values) with clipping until both hold.
    """
    shift = np.array([0.0, margin, 2 * margin])
    x = np.clip(np.asarray(x, dtype=float), lower, upper)
    for _ in range(50):
        y = _isotonic(x - shift) + shift
        y = np.clip(y, lower, upper)
        if np.all(np.diff(y) >= margin * (1 - 1e-9)):
            return y
        x = y
    raise ConfigurationError("bounds leave no geometry with d < D < pitch")


def feasible(x, lower, upper, margin: float = ORDER_MARGIN) -> bool:
    x = np.asarray(x)
    return bool(np.all(x >= lower) and np.all(x <= upper) and np.all(np.diff(x) >= margin * (1 - 1e-9)))


def _rng(seed: int, generation: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(generation), int(index)]))


def _geometry(x, length):
    return FiberGeometry(d=float(x[0]), D=float(x[1]), pitch=float(x[2]), length=length)


@dataclass
class FitResult:
    geometry: FiberGeometry
    fitness: float
    assignments: tuple
    trace: list
    generations: int
    evaluations: int
    seed: int
    config: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    refined: dict | None = None
    oracle: dict | None = None

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "fitness_rad2_per_m2": self.fitness,
            "assignments": [a.to_dict() for a in self.assignments],
            "trace": list(self.trace),
            "generations": self.generations,
            "evaluations": self.evaluations,
            "seed": self.seed,
            "config": self.config,
            "model": self.model,
            "refined": self.refined,
            "oracle": self.oracle,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def _workers(workers):
    if workers is None:
        workers = int(os.environ.get("BIREFPAIRS_WORKERS", "1"))
    return max(1, int(workers))


def run_ga(config: FitConfig, observations, model=None, ctx: NonlinearContext | None = None,
           workers: int | None = None, final_model=None) -> FitResult:
    """Real-coded GA over ``(d, D, pitch)``.

    Tournament selection, blend crossover, Gaussian mutation, repair onto
    the feasible set and elitism. Every individual draws from its own random
    stream keyed by ``(seed, generation, index)``, so results do not depend
    on the worker count. Stops at the generation cap or when the best
    fitness improved by less than ``stall_tol`` (relative) over
    ``stall_generations`` generations. With ``final_model`` the winner is
    re-evaluated at that fidelity and reported under ``refined``.
    """
    observations = list(observations)
    if not observations:
        raise ConfigurationError("at least one observation is required")
    for obs in observations:
        compatible_processes(obs)
    model = model if model is not None else SurrogateModel()
    lo, hi, sig = config.lower, config.upper, config.sigmas
    memo = {}

    def evaluate(x):
        key = tuple(float(v) for v in x)
        if key not in memo:
            memo[key] = fitness(_geometry(x, config.length), observations, model, ctx, config.weighted)
        return memo[key]

    n_workers = _workers(workers)
    pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None

    def evaluate_all(pop):
        if pool is None:
            return [evaluate(x) for x in pop]
        return list(pool.map(evaluate, pop))

    try:
        pop = [repair(_rng(config.seed, 0, i).uniform(lo, hi), lo, hi) for i in range(config.population)]
        fits = evaluate_all(pop)
        if all(math.isinf(f.total) for f in fits):
            raise ConfigurationError("every initial candidate failed to evaluate; check bounds and model")
        trace = []
        gen = 0
        for gen in range(1, config.generations + 1):
            order = sorted(range(len(pop)), key=lambda i: (fits[i].total, tuple(pop[i])))
            trace.append(fits[order[0]].total)
            if len(trace) > config.stall_generations:
                old = trace[-1 - config.stall_generations]
                if math.isfinite(old) and old - trace[-1] <= config.stall_tol * abs(old):
                    gen -= 1
                    break
            totals = np.array([f.total for f in fits])
            children = [pop[i].copy() for i in order[:config.elites]]
            for idx in range(config.elites, config.population):
                rng = _rng(config.seed, gen, idx)

                def pick():
                    cand = rng.integers(0, len(pop), size=config.tournament)
                    return pop[min(cand, key=lambda i: (totals[i], i))]

                p1, p2 = pick(), pick()
                if rng.random() < config.crossover_rate:
                    span = np.abs(p1 - p2)
                    child = rng.uniform(np.minimum(p1, p2) - config.blend_alpha * span,
                                        np.maximum(p1, p2) + config.blend_alpha * span)
                else:
                    child = p1.copy()
                child = child + rng.normal(0.0, sig)
                children.append(repair(child, lo, hi))
            pop = children
            fits = evaluate_all(pop)
        else:
            order = sorted(range(len(pop)), key=lambda i: (fits[i].total, tuple(pop[i])))
            trace.append(fits[order[0]].total)
        best_i = min(range(len(pop)), key=lambda i: (fits[i].total, tuple(pop[i])))
    finally:
        if pool is not None:
            pool.shutdown()
    best = pop[best_i]
    geom = _geometry(best, config.length)
    result = FitResult(geom, fits[best_i].total, fits[best_i].assignments, trace, gen, len(memo), config.seed,
                       config.to_dict(), model.describe() if hasattr(model, "describe") else {})
    if final_model is not None:
        hi_fit = fitness(geom, observations, final_model, ctx, config.weighted)
        result.refined = {"fitness_rad2_per_m2": hi_fit.total,
                          "model": final_model.describe() if hasattr(final_model, "describe") else {},
                          "assignments": [a.to_dict() for a in hi_fit.assignments]}
    return result


@dataclass(frozen=True)
class OracleResult:
    geometry: FiberGeometry | None
    fitness: float
    evaluated: int

    def to_dict(self) -> dict:
        return {"geometry": self.geometry.to_dict() if self.geometry else None,
                "fitness_rad2_per_m2": self.fitness, "evaluated": self.evaluated}


def brute_force_fit(bounds, density, observations, model=None, ctx=None, length: float = 0.94,
                    axes: dict | None = None) -> OracleResult:
    """Exhaustive fitness over the feasible part of a ``density^3`` lattice.

    ``axes`` may give explicit per-parameter sample arrays instead.
    """
    if axes is None:
        if density < 8:
            raise ConfigurationError(f"grid density must be >= 8 per axis, got {density}")
        axes = {k: np.linspace(bounds[k][0], bounds[k][1], density) for k in PARAMS}
    model = model if model is not None else SurrogateModel()
    best = (math.inf, None)
    n = 0
    for d in axes["d"]:
        for D in axes["D"]:
            if not d < D:
                continue
            for p in axes["pitch"]:
                if not D < p:
                    continue
                g = FiberGeometry(d=float(d), D=float(D), pitch=float(p), length=length)
                f = fitness(g, observations, model, ctx).total
                n += 1
                if f < best[0]:
                    best = (f, g)
    return OracleResult(best[1], best[0], n)


def fitness_slice(geometry: FiberGeometry, observations, param: str, values, model=None, ctx=None):
    """Fitness along one parameter with the other two held at ``geometry``."""
    if param not in PARAMS:
        raise ConfigurationError(f"unknown parameter {param!r}")
    base = {"d": geometry.d, "D": geometry.D, "pitch": geometry.pitch}
    out = []
    for v in values:
        vals = dict(base, **{param: float(v)})
        try:
            g = FiberGeometry(d=vals["d"], D=vals["D"], pitch=vals["pitch"], length=geometry.length)
        except ConfigurationError:
            out.append(math.inf)
            continue
        out.append(fitness(g, observations, model, ctx).total)
    return np.array(out)


# --- I/O -------------------------------------------------------------------

def observations_to_csv(observations, path=None) -> str:
    buf = io.StringIO()
    buf.write("# units: lambda um, bandwidth nm, theta_p deg\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OBS_COLUMNS)
    for o in observations:
        w.writerow([repr(float(o.lambda_p_um)), repr(float(o.lambda_i_um)), repr(float(o.bandwidth_nm)),
                    o.idler_pol, repr(float(o.theta_p_deg)), o.process_hint or ""])
    text = buf.getvalue()
    if path is not None:
        atomic_write_text(path, text)
    return text


def observations_from_csv(path_or_text) -> list:
    """Read observations; accepts a path or the CSV text itself."""
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        path = Path(path_or_text)
        if not path.is_file():
            raise ConfigurationError(f"observation file not found: {path}")
        text = path.read_text()
    else:
        text = path_or_text
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(rows)
    missing = set(OBS_COLUMNS[:5]) - set(reader.fieldnames or ())
    if missing:
        raise ConfigurationError(f"observation CSV lacks columns {sorted(missing)}")
    out = []
    for n, row in enumerate(reader, start=1):
        try:
            out.append(PeakObservation(float(row["lambda_p_um"]), float(row["lambda_i_um"]),
                                       float(row["bandwidth_nm"]), row["idler_pol"].strip(),
                                       float(row["theta_p_deg"]), (row.get("process_hint") or "").strip() or None))
        except ValueError as exc:
            raise ConfigurationError(f"observation row {n}: {exc}") from None
    return out
