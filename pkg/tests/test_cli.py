import json
from pathlib import Path

import numpy as np
import pytest

from birefpairs import cli, geomfit
from birefpairs.fibermodel import FiberGeometry
from birefpairs.modesolver import DispersionTable
from birefpairs.sfwm import branches_from_json
from birefpairs.twophoton import read_matrix

DATA = Path(__file__).parent / "data"


def write_cfg(path, **sections):
    lines = []
    for name, items in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {v}" for k, v in items.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def tables_cfg(tmp_path, name="c.ini", **extra):
    sections = {"modes": {"source": "tables", "table_x": DATA / "fitted_x.csv", "table_y": DATA / "fitted_y.csv"}}
    for k, v in extra.items():
        sections.setdefault(k, {}).update(v)
    return write_cfg(tmp_path / name, **sections)


def test_missing_config_exit_2(tmp_path):
    assert cli.main(["modes", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_bad_config_exit_2(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[modes]\nsource = telepathy\n")
    assert cli.main(["modes", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    p.write_text("[modes]\nmystery_key = 1\n")
    assert cli.main(["modes", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    p.write_text("not an ini [[[\n")
    assert cli.main(["modes", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_unknown_command_exit_2():
    assert cli.main(["teleport"]) == 2


def test_override_precedence(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", pump={"theta_p_deg": "30"})
    cp = cli.load_config(cfg, ["pump.theta_p_deg=10"])
    assert cp["pump"]["theta_p_deg"] == "10"
    assert cli.load_config(cfg)["pump"]["theta_p_deg"] == "30"
    assert cli.load_config(None)["pump"]["theta_p_deg"] == "45"
    # mixed-case geometry keys stay distinct
    assert cli.geometry_from(cp) == FiberGeometry(0.702, 0.820, 1.088)


def test_modes_direct_with_cache(tmp_path):
    cfg = write_cfg(tmp_path / "m.ini",
                    modes={"lambda_min_um": "0.6", "lambda_max_um": "1.1", "n_samples": "16", "resolution": "20",
                           "cache_dir": tmp_path / "cache"})
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert cli.main(["modes", cfg, "--out", str(out1), "--quiet"]) == 0
    tx = DispersionTable.from_csv(out1 / "dispersion_x.csv")
    ty = DispersionTable.from_csv(out1 / "dispersion_y.csv")
    assert np.all(tx.n_eff >= ty.n_eff)
    m1 = json.loads((out1 / "manifest.json").read_text())
    assert m1["notes"]["cache"]["misses"] == 2
    assert cli.main(["modes", cfg, "--out", str(out2), "--quiet"]) == 0
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m2["notes"]["cache"]["hits"] == 2
    for name in ("dispersion_x.csv", "dispersion_y.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    out3 = tmp_path / "r3"
    assert cli.main(["modes", cfg, "--out", str(out3), "--quiet", "--no-cache"]) == 0
    assert (out3 / "dispersion_x.csv").read_bytes() == (out1 / "dispersion_x.csv").read_bytes()
    assert "cache" not in json.loads((out3 / "manifest.json").read_text())["notes"]


def test_contours_empty_process_list(tmp_path):
    cfg = tables_cfg(tmp_path, sfwm={"processes": ""})
    assert cli.main(["contours", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_contours_f_absent_near_0741(tmp_path):
    cfg = tables_cfg(tmp_path, sfwm={"n_pump": "200", "n_scan": "400"})
    out = tmp_path / "o"
    assert cli.main(["contours", cfg, "--out", str(out), "--quiet"]) == 0
    branches = branches_from_json((out / "contours.json").read_text())
    assert {b.process.label for b in branches} >= set("abcde")
    for b in branches:
        if b.process.label == "f":
            assert np.all(np.abs(b.lambdas_um[:, 0] - 0.741) > 0.002)
    assert (out / "contours.csv").read_text().startswith("# units:")


def test_spectra_theta45_and_theta0(tmp_path):
    cfg = tables_cfg(tmp_path)
    out = tmp_path / "s45"
    assert cli.main(["spectra", cfg, "--out", str(out), "--quiet"]) == 0
    files = sorted(p.name for p in out.glob("marginal_*.csv"))
    assert files == [f"marginal_{k}.csv" for k in "abcdef"]
    for k in "abcde":
        m = np.loadtxt(out / f"marginal_{k}.csv", delimiter=",", comments="#", skiprows=3)
        assert m[:, 2].max() == pytest.approx(1.0)
    out0 = tmp_path / "s0"
    assert cli.main(["spectra", cfg, "--out", str(out0), "--quiet", "--set", "pump.theta_p_deg=0"]) == 0
    assert sorted(p.name for p in out0.glob("marginal_*.csv")) == ["marginal_a.csv", "marginal_e.csv"]
    assert read_matrix(out0 / "jsi_total.csv").max() == 1.0


def test_spectra_raw_units(tmp_path):
    cfg = tables_cfg(tmp_path, twophoton={"normalize": "false"}, pump={"theta_p_deg": "0"})
    out = tmp_path / "raw"
    assert cli.main(["spectra", cfg, "--out", str(out), "--quiet"]) == 0
    m = np.loadtxt(out / "marginal_a.csv", delimiter=",", comments="#", skiprows=3)
    assert m[:, 2].max() > 10.0
    assert "relative units" in (out / "marginal_a.csv").read_text().splitlines()[0]


def test_jointprob_exports(tmp_path):
    cfg = tables_cfg(tmp_path, twophoton={"theta_step_deg": "5"})
    out = tmp_path / "jp"
    assert cli.main(["jointprob", cfg, "--out", str(out), "--quiet"]) == 0
    lin = read_matrix(out / "jointprob_linear.csv")
    db = read_matrix(out / "jointprob_db.csv")
    assert lin.shape[0] == 36 and db.shape == lin.shape
    assert db.min() == -60.0 and db.max() == 0.0
    meta = json.loads((out / "jointprob_db.json").read_text())
    assert meta["rows"]["values"][-1] == 175.0 and meta["db_floor"] == -60.0


def test_numeric_failure_exit_3(tmp_path):
    # pump outside the dispersion tables
    cfg = tables_cfg(tmp_path, pump={"lambda_p_um": "0.35"})
    assert cli.main(["spectra", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 3


@pytest.fixture(scope="module")
def obs_csv(tmp_path_factory, surrogate):
    d = tmp_path_factory.mktemp("obs")
    obs = geomfit.synthesize_observations(FiberGeometry(0.702, 0.820, 1.088), [0.741, 0.78, 0.82],
                                          geomfit.SurrogateModel(surrogate))
    geomfit.observations_to_csv(obs, d / "obs.csv")
    geomfit.observations_to_csv(obs[:2], d / "two.csv")
    return d


def test_fit_too_few_observations(obs_csv, tmp_path):
    assert cli.main(["fit", str(obs_csv / "two.csv"), "--out", str(tmp_path / "f"), "--quiet"]) == 2


def test_fit_seed_determinism_and_replay(obs_csv, tmp_path):
    cfg = write_cfg(tmp_path / "fit.ini", fit={"population": "12", "generations": "6"})
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["fit", str(obs_csv / "obs.csv"), "--config", cfg, "--seed", "11", "--quiet"]
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert (a / "fit_result.json").read_bytes() == (b / "fit_result.json").read_bytes()
    res = json.loads((a / "fit_result.json").read_text())
    assert res["seed"] == 11
    assert cli.main(["replay", str(a / "manifest.json"), "--out", str(tmp_path / "re"), "--quiet"]) == 0
    assert (tmp_path / "re" / "fit_result.json").read_bytes() == (a / "fit_result.json").read_bytes()


def test_replay_detects_changed_input(obs_csv, tmp_path):
    cfg = write_cfg(tmp_path / "fit.ini", fit={"population": "10", "generations": "2"})
    obs = tmp_path / "obs.csv"
    obs.write_bytes((obs_csv / "obs.csv").read_bytes())
    assert cli.main(["fit", str(obs), "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    obs.write_text(obs.read_text() + "0.8,0.6,1.0,x,45.0,\n")
    assert cli.main(["replay", str(tmp_path / "a" / "manifest.json"), "--quiet"]) == 2
