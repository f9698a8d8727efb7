import csv
import json
import math

import numpy as np
import pytest

from mipdeco import harness as hz
from mipdeco.balanced_truncation import ReducedModel
from mipdeco.cli import main
from mipdeco.config import ConfigError, load_config
from mipdeco.penalty import IpaSettings, brute_force_solve
from mipdeco.spacetime import load_vector_csv

TINY = ["--kind", "poisson", "--h", "0.125", "--n-t", "3", "--m", "2", "--S", "1"]


def run(tmp_path, *args):
    return main(["--output-dir", str(tmp_path), "--no-plots", *args])


def test_config_example():
    cfg = load_config(text="[instance]\nkind = poisson\nh = 0.0625\nS = 1\n[ipa]\np_max = 7\n"
                           "[mor]\nr = auto\n[output]\nplots = off\n")
    assert cfg.instance.S == 1 and cfg.instance.h == 0.0625
    assert cfg.ipa.p_max == 7 and cfg.mor["r"] is None and cfg.output["plots"] is False


@pytest.mark.parametrize("text, match", [
    ("[instance]\nwidth = 3\n", "instance.width"),
    ("[solver]\nx = 1\n", r"\[solver\]"),
    ("[ipa]\nsigma = 2.0\n", "sigma"),
    ("[instance]\nn_t = ten\n", "instance.n_t"),
])
def test_config_rejects_bad_input(text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(text=text)


def test_cli_unknown_config_key_exits_2(tmp_path, capsys):
    path = tmp_path / "run.ini"
    path.write_text("[instance]\nbogus = 1\n")
    assert run(tmp_path, "--config", str(path), "assemble") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"]["category"] == "config" and "bogus" in err["error"]["message"]


def test_cli_bad_argument_exits_2(tmp_path):
    assert run(tmp_path, "solve", "--variant", "magic") == 2


def test_cli_oracle_refuses_desk_instance(tmp_path, capsys):
    assert run(tmp_path, "oracle", "--h", "0.0625", "--n-t", "10", "--m", "3", "--S", "2") == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"]["category"] == "too_large"


def test_cli_oracle_tiny(tmp_path):
    assert run(tmp_path, "oracle", *TINY, "--seed", "1") == 0
    data = json.loads((tmp_path / "oracle.json").read_text())
    assert data["candidates"] == 125
    inst = hz.generate_instance(hz.InstanceSpec("poisson", 0.125, 3, 2, 1, seed=1))
    _, J = brute_force_solve(inst.problem)
    assert data["objective"] == pytest.approx(J, rel=1e-12)


def test_cli_assemble(tmp_path):
    assert run(tmp_path, "assemble", *TINY) == 0
    for name in ("M.mtx", "K.mtx", "Phi.mtx", "C.mtx", "M_obs.mtx", "free_vertices.csv", "manifest.json"):
        assert (tmp_path / name).exists()


def test_cli_reduce_writes_bundle(tmp_path):
    assert run(tmp_path, "reduce", *TINY, "--r", "6") == 0
    model = ReducedModel.load(tmp_path / "reduced_model.npz")
    assert model.r == 6
    rows = list(csv.reader(open(tmp_path / "hankel.csv")))
    assert rows[0] == ["r", "sigma_r_plus_1", "tail"]
    tails = [float(r[2]) for r in rows[1:]]
    assert np.all(np.diff(tails) <= 0) and tails[-1] == 0.0


def test_cli_relax_with_residual_history(tmp_path):
    assert run(tmp_path, "relax", *TINY, "--residual-history") == 0
    u = load_vector_csv(tmp_path / "control.csv")
    assert u.size == 12 and np.all((u > 0) & (u < 1))
    lines = (tmp_path / "residual_history.csv").read_text().splitlines()
    assert len(lines) > 2


def test_cli_solve_writes_trace_and_control(tmp_path, capsys):
    assert run(tmp_path, "solve", *TINY, "--p-max", "3", "--seed", "2") == 0
    u = load_vector_csv(tmp_path / "control.csv")
    assert set(np.unique(u)) <= {0.0, 1.0} and np.all(u.reshape(3, 4).sum(axis=1) <= 1)
    trace = json.loads((tmp_path / "trace.json").read_text())
    assert trace["variant"] == "full" and trace["records"]
    assert (tmp_path / "trace.csv").read_text().startswith("n,epsilon,J")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "solve"
    assert "objective=" in capsys.readouterr().out


def test_cli_solve_mor(tmp_path):
    assert run(tmp_path, "solve", *TINY, "--variant", "mor", "--p-max", "2") == 0
    assert json.loads((tmp_path / "trace.json").read_text())["variant"] == "mor"


def test_cli_writes_plots(tmp_path):
    assert main(["--output-dir", str(tmp_path), "relax", *TINY]) == 0
    assert (tmp_path / "control.png").stat().st_size > 0


def test_generate_instance_deterministic():
    spec = hz.InstanceSpec("poisson", 0.125, 3, 2, 1, seed=4)
    a, b = hz.generate_instance(spec), hz.generate_instance(spec)
    np.testing.assert_array_equal(a.problem.y_d, b.problem.y_d)
    c = hz.generate_instance(hz.InstanceSpec("poisson", 0.125, 3, 2, 1, seed=5))
    assert not np.array_equal(a.problem.y_d, c.problem.y_d)
    assert np.all((a.generator_centers >= 0.1) & (a.generator_centers <= 0.9))


def test_generate_instance_convection_diffusion():
    inst = hz.generate_instance(hz.InstanceSpec("convection_diffusion", 0.125, 3, 2, 1, seed=0))
    assert np.abs(inst.problem.y_d).max() > 0
    empty = hz.generate_instance(hz.InstanceSpec("poisson", 0.125, 3, 2, 0))
    assert np.all(empty.problem.y_d == 0)


def test_instance_spec_validation():
    with pytest.raises(ValueError):
        hz.InstanceSpec(kind="heat")
    with pytest.raises(ValueError):
        hz.InstanceSpec(m=2, S=5)


def test_compare_metrics_examples():
    mc, rel = hz.compare_metrics({"a": [1.0, 2.0, 3.0], "b": [1.0, 2.2, 2.7]})
    assert mc == {"a": 2, "b": 2}
    assert rel["a"] == pytest.approx((3.0 - 2.7) / 2.7)
    assert rel["b"] == pytest.approx(0.1)
    mc, rel = hz.compare_metrics({"a": [1.0, math.nan], "b": [1.0, 5.0]})
    assert mc == {"a": 1, "b": 2} and math.isnan(rel["a"]) and math.isnan(rel["b"])


def test_theta_for_variants():
    assert hz.VARIANTS[0].theta_for(40, 3) == 1
    assert hz.VARIANTS[1].theta_for(40, 3) == 6
    assert hz.VARIANTS[3].theta_for(40, 3) == 24
    assert hz.TIPA.theta_for(40, 3) is None


def test_experiment_compare_tiny(tmp_path):
    specs = [hz.InstanceSpec("poisson", 0.125, 3, 2, 1, seed=s) for s in range(2)]
    res = hz.experiment_compare(specs, ipa=IpaSettings(p_max=2), mor_r=None, mor_tol=1e-12)
    assert len(res.runs) == 4 and all(r.error == "" for r in res.runs)
    assert sum(res.min_count.values()) >= 2
    res.write_runs_csv(tmp_path / "runs.csv")
    res.write_summary_csv(tmp_path / "summary.csv")
    assert len((tmp_path / "runs.csv").read_text().splitlines()) == 5
