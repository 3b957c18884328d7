"""Command-line front end: ``birefpairs <command> CONFIG [options]``.

Configuration is an INI file with one section per module. Precedence is
built-in defaults < config file < ``--set section.key=value`` < dedicated
flags (``--seed``, ``--out``, ``--no-cache``, ``--oracle``). Every run
writes ``manifest.json`` next to its outputs. ``birefpairs replay
manifest.json`` reruns from the manifest and checks the output hashes.

Exit codes: 0 success, 2 usage or configuration, 3 numeric failure,
4 physics failure.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import BirefPairsError, ConfigurationError, PhysicsError
from .fibermodel import FiberGeometry, omega_to_um, um_to_omega
from .modesolver import POLARIZATIONS, SOLVER_VERSION, DispersionCache, DispersionTable, atomic_write_text, \
    dispersion_scan
from .sfwm import PAPER_WINDOW, SpectralWindow, branches_to_csv, branches_to_json, get_process, trace_contours
from .twophoton import PumpConfig, assemble_state, export_marginal, export_matrix, jsi_total, joint_prob, \
    marginal_idler, nonlinear_context

log = logging.getLogger("birefpairs")

COMMANDS = ("modes", "contours", "spectra", "jointprob", "fit")

DEFAULTS = {
    "geometry": {"d_um": "0.702", "D_um": "0.820", "pitch_um": "1.088", "length_m": "0.94", "n_rings": "4"},
    "modes": {"source": "direct", "lambda_min_um": "0.42", "lambda_max_um": "2.3", "n_samples": "48",
              "resolution": "30", "boundary": "dirichlet", "table_x": "", "table_y": "", "surrogate": "",
              "cache_dir": ""},
    "sfwm": {"processes": "a,b,c,d,e,f", "lambda_p_min_um": "0.70", "lambda_p_max_um": "0.90",
             "n_pump": "400", "n_scan": "800", "window": "paper", "nonlinear": "true", "n2": "2.6e-20"},
    "pump": {"lambda_p_um": "0.741", "bandwidth_nm": "0.4", "p_avg_w": "0.02", "f_rep_hz": "76e6",
             "theta_p_deg": "45"},
    "twophoton": {"normalize": "true", "coherent": "true", "analyzer": "signal", "theta_step_deg": "1"},
    "fit": {"observations": "", "model": "surrogate", "population": "48", "generations": "120", "seed": "0",
            "d_bounds": "0.4,1.1", "D_bounds": "0.5,1.3", "pitch_bounds": "0.8,1.6", "weighted": "false",
            "oracle_density": "12", "refine": "false", "min_observations": "3"},
}


# --- configuration ---------------------------------------------------------

def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    return cp


def load_config(path=None, overrides=()) -> configparser.ConfigParser:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides."""
    cp = _parser()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            cp.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.partition(".")
        if not sep or not dot:
            raise ConfigurationError(f"override must look like section.key=value, got {item!r}")
        if section not in cp:
            raise ConfigurationError(f"unknown config section {section!r}")
        cp[section][option] = value
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigurationError(f"unknown config section [{section}]")
        unknown = set(cp[section]) - set(DEFAULTS[section])
        if unknown:
            raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cp


def config_dict(cp) -> dict:
    return {s: dict(cp[s]) for s in cp.sections()}


def _get(cp, section, key, kind=str):
    raw = cp[section][key]
    try:
        if kind is bool:
            return cp[section].getboolean(key)
        if kind == "pair":
            lo, hi = (float(v) for v in raw.split(","))
            return lo, hi
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"[{section}] {key} = {raw!r} is not a valid {getattr(kind, '__name__', kind)}") \
            from None


def geometry_from(cp) -> FiberGeometry:
    return FiberGeometry.from_mapping(cp["geometry"])


def pump_from(cp) -> PumpConfig:
    return PumpConfig(lambda_p_um=_get(cp, "pump", "lambda_p_um", float),
                      bandwidth_nm=_get(cp, "pump", "bandwidth_nm", float),
                      p_avg=_get(cp, "pump", "p_avg_w", float), f_rep=_get(cp, "pump", "f_rep_hz", float),
                      theta_p_deg=_get(cp, "pump", "theta_p_deg", float))


def window_from(cp) -> SpectralWindow:
    name = cp["sfwm"]["window"].strip().lower()
    if name == "paper":
        return PAPER_WINDOW
    if name == "full":
        return SpectralWindow()
    raise ConfigurationError(f"[sfwm] window must be 'paper' or 'full', got {name!r}")


def processes_from(cp) -> list:
    labels = [s.strip() for s in cp["sfwm"]["processes"].split(",") if s.strip()]
    if not labels:
        raise ConfigurationError("[sfwm] processes is empty")
    return [get_process(lab).label for lab in labels]


# --- run context -----------------------------------------------------------

class Run:
    """Collects outputs, inputs and notes for the manifest."""

    def __init__(self, command, cp, out_dir, use_cache=True):
        self.command = command
        self.cp = cp
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.use_cache = use_cache
        self.outputs = []
        self.inputs = {}
        self.notes = {}

    def path(self, name) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def add_input(self, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"input file not found: {path}")
        self.inputs[str(path.resolve())] = _sha256(path)

    def cache(self):
        if not self.use_cache:
            return None
        root = self.cp["modes"]["cache_dir"].strip() or None
        return DispersionCache(root)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dispersion_tables(run: Run, geometry: FiberGeometry) -> dict:
    """Dispersion tables from the configured source: direct scan, surrogate or CSV files."""
    cp = run.cp
    source = cp["modes"]["source"].strip().lower()
    lam = (_get(cp, "modes", "lambda_min_um", float), _get(cp, "modes", "lambda_max_um", float))
    if not 0 < lam[0] < lam[1]:
        raise ConfigurationError("[modes] wavelength range must be positive and ascending")
    n = _get(cp, "modes", "n_samples", int)
    if source == "tables":
        out = {}
        for p in POLARIZATIONS:
            path = cp["modes"][f"table_{p}"].strip()
            if not path:
                raise ConfigurationError(f"[modes] source=tables needs table_{p}")
            run.add_input(path)
            out[p] = DispersionTable.from_csv(path)
        return out
    if source == "surrogate":
        from .surrogate import Surrogate, default_omega_grid
        path = cp["modes"]["surrogate"].strip() or None
        if path:
            run.add_input(path)
        sur = Surrogate.load(path)
        run.notes["surrogate_lattice"] = sur.spec.digest()
        return sur.tables(geometry, default_omega_grid(n, lam))
    if source != "direct":
        raise ConfigurationError(f"[modes] source must be direct, surrogate or tables, got {source!r}")
    omega_range = (float(um_to_omega(lam[1])), float(um_to_omega(lam[0])))
    res = _get(cp, "modes", "resolution", float)
    boundary = cp["modes"]["boundary"].strip()
    cache = run.cache()
    if cache is None:
        return {p: dispersion_scan(geometry, omega_range, n, p, res, boundary) for p in POLARIZATIONS}
    tables = {p: cache.get(geometry, omega_range, n, p, res, boundary) for p in POLARIZATIONS}
    run.notes["cache"] = {"dir": str(cache.root), "hits": cache.hits, "misses": cache.misses}
    return tables


def _ctx(run, pump, tables):
    return nonlinear_context(pump, tables, _get(run.cp, "sfwm", "n2", float),
                             _get(run.cp, "sfwm", "nonlinear", bool))


# --- commands --------------------------------------------------------------

def cmd_modes(run: Run, args) -> None:
    geom = geometry_from(run.cp)
    tables = dispersion_tables(run, geom)
    for p in POLARIZATIONS:
        tables[p].to_csv(run.path(f"dispersion_{p}.csv"))
    nx, ny = tables["x"].n_eff, tables["y"].n_eff
    run.notes["slow_axis_x"] = bool(np.all(nx >= ny))
    run.notes["max_birefringence"] = float(np.max(np.abs(nx - ny)))


def cmd_contours(run: Run, args) -> None:
    cp = run.cp
    procs = processes_from(cp)
    geom = geometry_from(cp)
    tables = dispersion_tables(run, geom)
    pump = pump_from(cp)
    ctx = _ctx(run, pump, tables)
    lp = (_get(cp, "sfwm", "lambda_p_min_um", float), _get(cp, "sfwm", "lambda_p_max_um", float))
    window = window_from(cp)
    branches = []
    for label in procs:
        branches.extend(trace_contours(label, lp, tables, ctx, window, n_pump=_get(cp, "sfwm", "n_pump", int),
                                       n_scan=_get(cp, "sfwm", "n_scan", int)))
    atomic_write_text(run.path("contours.json"), branches_to_json(branches))
    atomic_write_text(run.path("contours.csv"), branches_to_csv(branches))
    run.notes["branches"] = {lab: sum(b.process.label == lab for b in branches) for lab in procs}


def _state(run):
    cp = run.cp
    geom = geometry_from(cp)
    tables = dispersion_tables(run, geom)
    pump = pump_from(cp)
    ctx = _ctx(run, pump, tables)
    return assemble_state(pump, geom, tables, ctx, window=window_from(cp))


def cmd_spectra(run: Run, args) -> None:
    state = _state(run)
    normalize = _get(run.cp, "twophoton", "normalize", bool)
    coherent = _get(run.cp, "twophoton", "coherent", bool)
    written = []
    for label in state.active:
        sheet = state.sheets[label]
        wi, m = marginal_idler(sheet, normalize=normalize)
        # weight by w_j^2 so raw marginals carry relative process rates
        if not normalize:
            m = m * state.weights[label] ** 2
        export_marginal(run.path(f"marginal_{label}.csv"), wi, m,
                        f"process {label} idler marginal ({'unit peak' if normalize else 'relative units'})")
        written.append(label)
    total = jsi_total(state, coherent)
    any_sheet = next(iter(state.sheets.values()))
    ws, wi, dense = any_sheet.dense(total)
    stem = run.path("jsi_total.csv").with_suffix("")
    run.outputs.append(stem.with_suffix(".json"))
    export_matrix(stem, dense, ws, wi, "omega_s_rad_s", "omega_i_rad_s", "total JSI (unit max)",
                  extra={"weights": state.weights, "coherent": coherent})
    run.notes["marginals"] = written
    run.notes["weights"] = state.weights


def cmd_jointprob(run: Run, args) -> None:
    cp = run.cp
    step = _get(cp, "twophoton", "theta_step_deg", float)
    if not 0 < step <= 90:
        raise ConfigurationError("[twophoton] theta_step_deg must lie in (0, 90]")
    theta = np.arange(0.0, 180.0, step)
    state = _state(run)
    wi, P = joint_prob(state, theta, coherent=_get(cp, "twophoton", "coherent", bool),
                       analyzer=cp["twophoton"]["analyzer"].strip())
    for db, name in ((False, "jointprob_linear"), (True, "jointprob_db")):
        stem = run.path(f"{name}.csv").with_suffix("")
        run.outputs.append(stem.with_suffix(".json"))
        export_matrix(stem, P, theta, wi, "theta_deg", "omega_i_rad_s", "P(theta, omega_i)", db=db,
                      extra={"lambda_i_um": [float(v) for v in omega_to_um(wi)],
                             "analyzer": cp["twophoton"]["analyzer"].strip()})


def cmd_fit(run: Run, args) -> None:
    from . import geomfit

    cp = run.cp
    obs_path = args.observations or cp["fit"]["observations"].strip()
    if not obs_path:
        raise ConfigurationError("fit needs an observations CSV (positional argument or [fit] observations)")
    run.add_input(obs_path)
    cp["fit"]["observations"] = str(Path(obs_path).resolve())
    observations = geomfit.observations_from_csv(Path(obs_path))
    need = _get(cp, "fit", "min_observations", int)
    if len(observations) < max(need, 1):
        raise ConfigurationError(f"fit needs at least {need} observations, got {len(observations)}")
    config = geomfit.FitConfig(
        bounds={k: _get(cp, "fit", f"{k}_bounds", "pair") for k in geomfit.PARAMS},
        population=_get(cp, "fit", "population", int), generations=_get(cp, "fit", "generations", int),
        seed=_get(cp, "fit", "seed", int), length=_get(cp, "geometry", "length_m", float),
        weighted=_get(cp, "fit", "weighted", bool))
    model_name = cp["fit"]["model"].strip().lower()
    lam = (_get(cp, "modes", "lambda_min_um", float), _get(cp, "modes", "lambda_max_um", float))
    direct = geomfit.DirectModel(lam, max(_get(cp, "modes", "n_samples", int), 16),
                                 _get(cp, "modes", "resolution", float), run.cache())
    if model_name == "surrogate":
        from .surrogate import Surrogate, default_omega_grid
        path = cp["modes"]["surrogate"].strip() or None
        if path:
            run.add_input(path)
        model = geomfit.SurrogateModel(Surrogate.load(path), default_omega_grid(64, lam))
    elif model_name == "direct":
        model = direct
    else:
        raise ConfigurationError(f"[fit] model must be surrogate or direct, got {model_name!r}")
    final = direct if _get(cp, "fit", "refine", bool) and model is not direct else None
    result = geomfit.run_ga(config, observations, model, final_model=final)
    if args.oracle:
        oracle = geomfit.brute_force_fit(config.bounds, _get(cp, "fit", "oracle_density", int), observations,
                                         model, length=config.length)
        result.oracle = dict(oracle.to_dict(), ga_not_worse=bool(result.fitness <= oracle.fitness))
    atomic_write_text(run.path("fit_result.json"), result.to_json())
    run.notes["fitness"] = result.fitness


HANDLERS = {"modes": cmd_modes, "contours": cmd_contours, "spectra": cmd_spectra, "jointprob": cmd_jointprob,
            "fit": cmd_fit}


# --- manifest --------------------------------------------------------------

def _versions() -> dict:
    return {"birefpairs": __version__, "solver": SOLVER_VERSION, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def execute(command, cp, out_dir, use_cache=True, args=None) -> dict:
    """Run one command and write its manifest; returns the manifest."""
    args = args or argparse.Namespace(observations=None, oracle=False)
    run = Run(command, cp, out_dir, use_cache)
    t0 = time.perf_counter()
    HANDLERS[command](run, args)
    elapsed = time.perf_counter() - t0
    manifest = {
        "subcommand": command,
        "config": config_dict(cp),
        "flags": {"no_cache": not use_cache, "oracle": bool(getattr(args, "oracle", False))},
        "inputs": run.inputs,
        "outputs": {p.name: _sha256(p) for p in run.outputs},
        "versions": _versions(),
        "seed": int(cp["fit"]["seed"]),
        "wall_time_s": round(elapsed, 3),
        "notes": run.notes,
    }
    atomic_write_text(Path(out_dir) / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def replay(manifest_path, out_dir=None) -> tuple:
    """Rerun a manifest; returns ``(manifest, mismatched output names)``."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ConfigurationError(f"manifest not found: {manifest_path}")
    try:
        old = json.loads(manifest_path.read_text())
        command = old["subcommand"]
    except (ValueError, KeyError) as exc:
        raise ConfigurationError(f"not a run manifest: {manifest_path} ({exc})") from None
    for path, digest in old.get("inputs", {}).items():
        if not Path(path).is_file() or _sha256(path) != digest:
            raise ConfigurationError(f"input changed since the manifest was written: {path}")
    cp = _parser()
    cp.read_dict(old["config"])
    flags = old.get("flags", {})
    args = argparse.Namespace(observations=None, oracle=flags.get("oracle", False))
    out_dir = Path(out_dir) if out_dir is not None else manifest_path.parent / "replay"
    new = execute(command, cp, out_dir, not flags.get("no_cache", False), args)
    bad = sorted(k for k in old["outputs"] if new["outputs"].get(k) != old["outputs"][k])
    return new, bad


# --- entry point -----------------------------------------------------------

def build_argparser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="birefpairs", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"birefpairs {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "fit":
            p.add_argument("observations", nargs="?", help="observation CSV")
            p.add_argument("--config", dest="config", help="INI config file")
            p.add_argument("--oracle", action="store_true", help="also run the brute-force lattice search")
        else:
            p.add_argument("config", help="INI config file")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--seed", type=int, help="random seed (overrides [fit] seed)")
        p.add_argument("--no-cache", action="store_true", help="bypass the dispersion cache")
        p.add_argument("--quiet", action="store_true", help="suppress progress messages")
    p = sub.add_parser("replay", help="rerun a manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: <manifest dir>/replay)")
    p.add_argument("--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_argparser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        if args.command == "replay":
            manifest, bad = replay(args.manifest, args.out)
            if bad:
                log.error("replay outputs differ: %s", ", ".join(bad))
                return 3
            log.info("replay reproduced %d outputs", len(manifest["outputs"]))
            return 0
        cp = load_config(args.config, args.overrides)
        if args.seed is not None:
            cp["fit"]["seed"] = str(args.seed)
        if args.command != "fit":
            args.observations = None
            args.oracle = False
        if args.command == "contours":
            processes_from(cp)
        manifest = execute(args.command, cp, args.out, not args.no_cache, args)
        log.info("%s: wrote %d files to %s in %.1f s", args.command, len(manifest["outputs"]), args.out,
                 manifest["wall_time_s"])
        return 0
    except PhysicsError as exc:
        log.error("physics failure: %s", exc)
        return 4
    except BirefPairsError as exc:
        log.error("%s", exc)
        return exc.exit_code if exc.exit_code in (2, 3, 4) else 3
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
