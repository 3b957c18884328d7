import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from birefpairs import geomfit
from birefpairs.errors import ConfigurationError
from birefpairs.fibermodel import FiberGeometry
from birefpairs.geomfit import (FitConfig, InconsistentObservationError, PeakObservation, SurrogateModel,
                                brute_force_fit, compatible_processes, fitness, repair, run_ga,
                                synthesize_observations)

GSTAR = FiberGeometry(d=0.702, D=0.820, pitch=1.088)
PUMPS = np.linspace(0.741, 0.850, 6)


def labels(obs):
    return {p.label for p in compatible_processes(obs)}


def test_compatible_processes_examples():
    assert labels(PeakObservation(0.741, 0.6, 1.0, "x", 0.0)) == {"a"}
    assert labels(PeakObservation(0.741, 0.6, 1.0, "y", 0.0)) == {"e"}
    assert labels(PeakObservation(0.741, 0.6, 1.0, "x", 45.0)) == {"a", "d", "f"}
    assert labels(PeakObservation(0.741, 0.6, 1.0, "y", 90.0)) == {"b"}
    assert labels(PeakObservation(0.741, 0.6, 1.0, "x", 45.0, "d")) == {"d"}


def test_inconsistent_observation():
    with pytest.raises(InconsistentObservationError):
        compatible_processes(PeakObservation(0.741, 0.6, 1.0, "y", 0.0, "a"))
    with pytest.raises(InconsistentObservationError):
        compatible_processes(PeakObservation(0.741, 0.6, 1.0, "y", 90.0, "f"))


@pytest.mark.parametrize("args", [(0.741, 0.8, 1.0, "x", 45.0), (0.741, 0.6, 0.0, "x", 45.0),
                                  (0.741, 0.6, 1.0, "z", 45.0), (0.741, 0.6, 1.0, "x", 100.0)])
def test_observation_invariants(args):
    with pytest.raises(ConfigurationError):
        PeakObservation(*args)


@pytest.fixture(scope="module")
def model(surrogate):
    return SurrogateModel(surrogate)


@pytest.fixture(scope="module")
def observations(model):
    return synthesize_observations(GSTAR, PUMPS, model)


def test_synthetic_dataset_shape(observations):
    assert len(observations) >= 3 * len(PUMPS)
    assert {o.idler_pol for o in observations} == {"x", "y"}


def test_fitness_self_consistent(observations, model):
    val = fitness(GSTAR, observations, model)
    assert val.total < 1e-2
    for a in val.assignments:
        assert a.process in {p.label for p in compatible_processes(a.observation)}
    assert val.total == pytest.approx(sum(a.residual**2 for a in val.assignments), rel=1e-12)


def test_fitness_increases_with_pitch(observations, model):
    pert = FiberGeometry(d=GSTAR.d, D=GSTAR.D, pitch=GSTAR.pitch * 1.05)
    assert fitness(pert, observations, model).total > fitness(GSTAR, observations, model).total


def test_fitness_permutation_invariant(observations, model):
    rng = np.random.default_rng(3)
    g = FiberGeometry(0.68, 0.84, 1.10)
    perm = [observations[i] for i in rng.permutation(len(observations))]
    assert fitness(g, perm, model).total == pytest.approx(fitness(g, observations, model).total, rel=1e-12)


def test_fitness_failure_is_infinite(observations, model):
    # d/D below the surrogate lattice
    assert math.isinf(fitness(FiberGeometry(0.2, 0.9, 1.2), observations, model).total)


def test_weighted_fitness_scales(observations, model):
    g = FiberGeometry(0.68, 0.84, 1.10)
    plain = fitness(g, observations, model)
    weighted = fitness(g, observations, model, weighted=True)
    assert weighted.total > 0 and weighted.total != plain.total


def test_brute_force_single_point(observations, model):
    axes = {"d": [GSTAR.d], "D": [GSTAR.D], "pitch": [GSTAR.pitch]}
    res = brute_force_fit(None, 1, observations, model, axes=axes)
    assert res.geometry == GSTAR and res.evaluated == 1


def test_brute_force_density_floor(observations, model):
    with pytest.raises(ConfigurationError):
        brute_force_fit(geomfit.DEFAULT_BOUNDS, 4, observations, model)


def test_pitch_slice_unimodal(observations, model):
    vals = np.linspace(0.97, 1.03, 13) * GSTAR.pitch
    f = geomfit.fitness_slice(GSTAR, observations, "pitch", vals, model)
    k = int(np.argmin(f))
    assert k == 6
    assert np.all(np.diff(f[:k + 1]) < 0) and np.all(np.diff(f[k:]) > 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1.0, 3.0), min_size=3, max_size=3))
def test_repair_always_feasible(x):
    cfg = FitConfig()
    y = repair(np.array(x), cfg.lower, cfg.upper)
    assert geomfit.feasible(y, cfg.lower, cfg.upper)
    FiberGeometry(*y)


def test_repair_keeps_feasible_points():
    cfg = FitConfig()
    x = np.array([0.7, 0.8, 1.1])
    assert np.array_equal(repair(x, cfg.lower, cfg.upper), x)


@pytest.mark.parametrize("kw", [dict(population=4), dict(elites=48), dict(bounds={"d": (1, 0.5)}),
                                dict(bounds={"d": (0.4, 1.1), "D": (0.5, 1.3), "pitch": (1.0, 0.8)})])
def test_fit_config_invariants(kw):
    with pytest.raises(ConfigurationError):
        FitConfig(**kw)


@pytest.fixture(scope="module")
def small_run(observations, model):
    cfg = FitConfig(population=16, generations=12, seed=5)
    return cfg, run_ga(cfg, observations, model)


def test_ga_monotone_elitism(small_run):
    _, res = small_run
    assert np.all(np.diff(res.trace) <= 0)
    assert res.fitness == res.trace[-1]


def test_ga_deterministic(small_run, observations, model):
    cfg, res = small_run
    again = run_ga(cfg, observations, model)
    assert again.to_json() == res.to_json()
    threaded = run_ga(cfg, observations, model, workers=3)
    assert threaded.to_json() == res.to_json()


def test_ga_result_invariants(small_run):
    cfg, res = small_run
    g = res.geometry
    assert geomfit.feasible([g.d, g.D, g.pitch], cfg.lower, cfg.upper)
    assert res.fitness == pytest.approx(sum(a.residual**2 for a in res.assignments), rel=1e-12)
    data = json.loads(res.to_json())
    assert data["geometry"]["d_um"] == g.d and data["seed"] == 5


def test_observation_csv_round_trip(tmp_path, observations):
    path = tmp_path / "obs.csv"
    geomfit.observations_to_csv(observations, path)
    assert geomfit.observations_from_csv(path) == observations
    assert path.read_text().startswith("# units:")


def test_observation_csv_missing_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("lambda_p_um,lambda_i_um\n0.741,0.6\n")
    with pytest.raises(ConfigurationError):
        geomfit.observations_from_csv(p)
