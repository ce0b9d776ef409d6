import json

import pytest

from qndspin import cli
from qndspin.cli import ConfigError, Scenario, execute, main, parse_config
from qndspin.hilbert import SimParams

SMALL = dict(n_traj=6, T=0.3, chunk_size=4, n_keep=3)


def test_named_scenario_defaults():
    s = parse_config({"scenario": "fig2", "seed": "42"})
    p = s.params
    assert (p.N, p.M, p.T, p.dt, p.seed, p.controller) == (10, 1.0, 5.0, 1e-3, 42, "none")
    assert parse_config({"scenario": "fig3"}).params.controller == "law1"
    assert parse_config({"scenario": "fig4"}).params.controller == "law2"
    assert parse_config({"scenario": "fig1"}).params.n_traj == 1


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError, match="eta"):
        parse_config({"scenario": "fig2", "eta": "1.5"})
    with pytest.raises(ConfigError, match="N"):
        parse_config({"scenario": "fig2", "N": "ten"})
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config({"scenario": "fig2", "gain": "3"})
    with pytest.raises(ConfigError, match="unknown scenario"):
        parse_config({"scenario": "fig9"})


def test_empty_custom_lists_required_keys():
    with pytest.raises(ConfigError) as info:
        parse_config({})
    for key in cli.CUSTOM_REQUIRED:
        assert key in str(info.value)


def test_flags_override_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# experiment\nscenario = fig4\nseed = 3\nlambda = 4   # gain\neta = 0.5\n")
    s = parse_config({"seed": "9"}, cfg)
    assert s.params.seed == 9 and s.params.lam == 4.0 and s.params.eta == 0.5
    assert s.params.controller == "law2"
    cfg.write_text("bogus = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        parse_config({}, cfg)
    cfg.write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        parse_config({}, cfg)


def test_custom_scenario_from_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("N = 4\nM = 2\neta = 1\ndt = 0.001\nT = 0.5\nn_traj = 3\ncontroller = law1\n")
    s = parse_config({}, cfg)
    assert s.name == "custom" and s.params.N == 4 and s.params.M == 2.0


def test_manifest_round_trip(tmp_path):
    s = parse_config({"scenario": "fig3", "out": str(tmp_path / "o"), "theta": "1.2", **SMALL})
    data = json.loads(json.dumps(s.to_manifest()))
    assert Scenario.from_manifest(data) == s


def test_execute_writes_outputs_deterministically(tmp_path):
    outs = []
    for name in ("a", "b"):
        s = parse_config({"scenario": "fig4", "out": str(tmp_path / name), "seed": "5", **SMALL})
        out, _ = execute(s)
        outs.append(out)
    for f in ("trajectories.csv", "ensemble.csv", "histogram.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    header = (outs[0] / "trajectories.csv").read_text().splitlines()[0]
    assert header == "t,traj_id,jz_mean,jz_var,jx_mean,b,y_int"
    ens = (outs[0] / "ensemble.csv").read_text().splitlines()
    assert ens[0].startswith("t,e_var,e_jz,e_jz2,e_cost,se_")
    assert len(ens) == 1 + 31
    hist = (outs[0] / "histogram.csv").read_text().splitlines()
    assert hist[0] == "m,count" and sum(int(r.split(",")[1]) for r in hist[1:]) == 6
    assert (outs[0] / "plot_fig4.py").exists()
    manifest = json.loads((outs[0] / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["code_version"]
    assert Scenario.from_manifest(manifest).params == SimParams(**manifest["params"])


def test_fig1_extra_outputs(tmp_path):
    s = parse_config({"scenario": "fig1", "out": str(tmp_path / "f1"), "T": "0.2"})
    out, _ = execute(s)
    for f in ("populations.csv", "photocurrent.csv", "bloch_density.csv", "plot_fig1.py"):
        assert (out / f).exists()
    pops = (out / "populations.csv").read_text().splitlines()
    assert pops[0].split(",")[:2] == ["t", "p_-5"] and len(pops) == 1 + 21


def test_failed_run_leaves_no_outputs(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("integrator exploded")

    monkeypatch.setattr(cli, "run_ensemble", broken)
    s = parse_config({"scenario": "fig2", "out": str(tmp_path / "x"), **SMALL})
    with pytest.raises(RuntimeError):
        execute(s)
    assert list(tmp_path.iterdir()) == []


def test_main_exit_codes(tmp_path, capsys):
    assert main(["list-scenarios"]) == 0
    assert "fig4" in capsys.readouterr().out
    assert main(["run", "--scenario", "fig2", "--eta", "1.5"]) == 1
    assert "eta" in capsys.readouterr().err
    assert main(["run", "--scenario", "custom"]) == 1
    out = tmp_path / "run"
    args = ["run", "--scenario", "fig2", "--seed", "2", "--out", str(out), "--n-traj", "4", "--T", "0.2"]
    assert main(args) == 0
    again = tmp_path / "again"
    assert main(["run", "--manifest", str(out / "manifest.json"), "--out", str(again)]) == 0
    assert (again / "ensemble.csv").read_bytes() == (out / "ensemble.csv").read_bytes()
    assert main(["run", "--manifest", str(tmp_path / "missing.json")]) == 1
    # tiny law-2 run cannot meet the acceptance thresholds
    assert main(["verify", "fig4", "--n-traj", "20", "--T", "0.5"]) == 2
    assert "[FAIL]" in capsys.readouterr().out
    assert main(["verify", "fig1", "--T", "1"]) == 0
