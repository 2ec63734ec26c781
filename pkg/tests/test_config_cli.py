import csv
import json

import numpy as np
import pytest

from gbenard.cli import EXIT_CONFIG, EXIT_OK, main
from gbenard.config import ConfigError, RunConfig, initial_fields, load_config, loads
from gbenard.gdomain import Grid2, g_divergence, make_gweight, norm_g, read_snapshot

SMALL = """
[case]
kind = "evolve"

[grid]
n = 32

[basis]
m = 6

[physics]
alpha = 0.5
nu = 0.1
kappa = 0.1
xi = [0.0, 1.0]

[weight]
family = "sinusoidal"
amplitude = 0.1

[initial]
kind = "random"
amplitude = 0.2
seed = 3

[forcing]
temperature = "heat_source"
profile = "sine"
alpha1 = 0.25
alpha2 = 0.25

[time]
t_end = 0.5
n_steps = 32

[output]
snapshot_every = 16
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


class TestConfig:
    @pytest.mark.parametrize("name", ["decay", "benard", "relaxation", "manufactured"])
    def test_bundled(self, name):
        cfg = load_config(name)
        assert isinstance(cfg, RunConfig) and cfg.source == f"{name}.toml"

    def test_bundled_battery_shape(self):
        for name in ("decay", "benard"):
            cfg = load_config(name)
            assert (cfg.n, cfg.m, cfg.t_end, cfg.n_steps) == (64, 16, 1.0, 1024)
            assert cfg.physics().alpha == 0.5

    def test_missing(self):
        with pytest.raises(ConfigError, match="no such config"):
            load_config("nope")

    @pytest.mark.parametrize(
        "patch,line,msg",
        [
            (("n = 32", "n = 33"), 6, "power of two"),
            (("alpha = 0.5", "alpha = 1.5"), 12, "alpha must lie"),
            (("nu = 0.1", "nu = \"fast\""), 13, "must be float"),
            (("kappa = 0.1", "kappa = 0.1\nviscosity = 2.0"), 15, "unknown key"),
        ],
    )
    def test_errors_carry_line_numbers(self, patch, line, msg):
        with pytest.raises(ConfigError, match=msg) as exc:
            loads(SMALL.replace(*patch), "small.toml")
        assert f"small.toml:{line}:" in str(exc.value)

    def test_syntax_error(self):
        with pytest.raises(ConfigError):
            loads("[grid\nn = 3")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            loads(SMALL + "\n[extra]\nx = 1\n")

    def test_int_accepted_as_float(self):
        assert loads(SMALL.replace("t_end = 0.5", "t_end = 1")).t_end == 1.0

    def test_overrides_and_digest(self):
        cfg = loads(SMALL)
        other = cfg.with_overrides(grid={"n": 64})
        assert other.n == 64 and cfg.n == 32
        assert cfg.digest() == loads(SMALL).digest() != other.digest()
        with pytest.raises(ConfigError):
            cfg.with_overrides(grid={"n": 100})
        assert loads(cfg.dumps()).raw == cfg.raw

    def test_bad_weight(self):
        cfg = loads(SMALL.replace("amplitude = 0.1", "amplitude = 0.9", 1))
        with pytest.raises(ConfigError, match="smallness"):
            cfg.weight()

    def test_initial_fields_admissible(self):
        g = make_gweight("sinusoidal", Grid2(32), amplitude=0.1)
        for kind in ("taylor_green", "random"):
            cfg = loads(SMALL.replace('kind = "random"', f'kind = "{kind}"'))
            u, th = initial_fields(cfg, g)
            assert np.abs(g_divergence(u, g)).max() <= 1e-8 * norm_g(u, g)
            assert abs(th.mean()) < 1e-14
        cfg = loads(SMALL.replace('kind = "random"', 'kind = "vortex"'))
        with pytest.raises(ConfigError):
            initial_fields(cfg, g)


class TestCLI:
    def test_run_artifacts(self, small_cfg, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["run", "--config", str(small_cfg), "--out", str(out)]) == EXIT_OK
        names = sorted(p.name for p in out.iterdir())
        assert names == ["coefficients.csv", "config.toml", "manifest.json", "report.json", "snapshots", "trajectory.csv"]
        snaps = sorted(p.name for p in (out / "snapshots").iterdir())
        assert snaps == ["theta_000000.bin", "theta_000016.bin", "theta_000032.bin", "u_000000.bin", "u_000016.bin", "u_000032.bin"]
        snap = read_snapshot(out / "snapshots" / "u_000032.bin")
        assert snap.values.shape == (2, 32, 32) and snap.time == 0.5 and snap.alpha == 0.5
        rows = (out / "trajectory.csv").read_text().splitlines()
        assert rows[0].startswith("t,u_l2,u_h1,theta_l2,theta_h1") and len(rows) == 34
        report = json.loads((out / "report.json").read_text())
        assert report["status"] == "ok" and report["energy"]["passed"] and report["apriori"]["passed"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["grid"]["n"] == 32 and len(manifest["config_sha256"]) == 64
        assert "ok: 32 steps" in capsys.readouterr().out

    def test_run_is_reproducible(self, small_cfg, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--config", str(small_cfg), "--out", str(a), "--seed", "11"]) == EXIT_OK
        assert main(["run", "--config", str(small_cfg), "--out", str(b), "--seed", "11"]) == EXIT_OK
        for p in sorted(a.rglob("*")):
            if p.is_file():
                assert p.read_bytes() == (b / p.relative_to(a)).read_bytes(), p.name

    def test_seed_changes_result(self, small_cfg, tmp_path):
        main(["run", "--config", str(small_cfg), "--out", str(tmp_path / "a"), "--seed", "1"])
        main(["run", "--config", str(small_cfg), "--out", str(tmp_path / "b"), "--seed", "2"])
        assert (tmp_path / "a" / "coefficients.csv").read_bytes() != (tmp_path / "b" / "coefficients.csv").read_bytes()

    def test_bad_config_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.toml"
        p.write_text(SMALL.replace("n = 32", "n = 30"))
        assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "bad.toml:6:" in capsys.readouterr().err

    def test_run_rejects_other_kinds(self, tmp_path):
        assert main(["run", "--config", "relaxation", "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_verify_fraccalc(self, tmp_path, capsys):
        out = tmp_path / "v"
        assert main(["verify", "fraccalc", "--out", str(out)]) == EXIT_OK
        lines = (out / "verify.jsonl").read_text().splitlines()
        assert all(json.loads(line)["passed"] for line in lines)
        assert not (out / "failures.jsonl").exists()
        assert "checks passed" in capsys.readouterr().out

    def test_verify_unknown_suite(self):
        assert main(["verify", "everything"]) == EXIT_CONFIG

    def test_converge_relaxation(self, tmp_path, capsys):
        out = tmp_path / "c"
        assert main(["converge", "--config", "relaxation", "--levels", "4", "--out", str(out)]) == EXIT_OK
        rows = (out / "convergence.csv").read_text().splitlines()
        assert rows[0] == "n_steps,error,order" and len(rows) == 5
        orders = [float(r.split(",")[2]) for r in rows[2:]]
        assert min(orders) > 1.35

    def test_converge_single_level(self, tmp_path, capsys):
        out = tmp_path / "c"
        assert main(["converge", "--config", "relaxation", "--levels", "1", "--out", str(out)]) == EXIT_OK
        rows = (out / "convergence.csv").read_text().splitlines()
        assert rows[0] == "n_steps,error" and len(rows) == 2
        assert "order" not in capsys.readouterr().out

    def test_converge_classical_order(self, tmp_path):
        p = tmp_path / "r1.toml"
        p.write_text('[case]\nkind = "relaxation"\n[physics]\nalpha = 1.0\n[converge]\nbase_steps = 64\n')
        out = tmp_path / "c"
        assert main(["converge", "--config", str(p), "--levels", "4", "--out", str(out), "--threads", "2"]) == EXIT_OK
        orders = [float(r.split(",")[2]) for r in (out / "convergence.csv").read_text().splitlines()[2:]]
        assert all(abs(o - 1.0) < 0.05 for o in orders)

    def test_converge_bad_levels(self):
        assert main(["converge", "--config", "relaxation", "--levels", "0"]) == EXIT_CONFIG

    def test_smallness_violation_exit(self, tmp_path, capsys):
        p = tmp_path / "steep.toml"
        p.write_text(SMALL.replace("amplitude = 0.1", "amplitude = 0.9", 1))
        assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "smallness violation" in capsys.readouterr().err

    def test_verify_operators_with_seed(self, tmp_path):
        out = tmp_path / "v"
        assert main(["verify", "operators", "--seed", "5", "--out", str(out)]) == EXIT_OK
        names = [json.loads(line)["name"] for line in (out / "verify.jsonl").read_text().splitlines()]
        assert "trilinear_skew" in names and "spectrum_lower_bound" in names

    def test_basis_cache(self, small_cfg, tmp_path, capsys):
        d = tmp_path / "cache"
        assert main(["basis-cache", "build", "--config", str(small_cfg), "--cache-dir", str(d)]) == EXIT_OK
        path = capsys.readouterr().out.strip()
        assert main(["basis-cache", "inspect", path]) == EXIT_OK
        text = capsys.readouterr().out
        assert "modes      6" in text and "velocity eigenvalues" in text


def _column(path, name):
    with open(path) as fh:
        return np.array([float(r[name]) for r in csv.DictReader(fh)])


class TestBundledRuns:
    def test_decay_norms_monotone(self, tmp_path):
        out = tmp_path / "decay"
        assert main(["run", "--config", "decay", "--out", str(out)]) == EXIT_OK
        for col in ("u_l2", "theta_l2"):
            assert np.diff(_column(out / "trajectory.csv", col)).max() <= 1e-9

    def test_benard_regression(self, tmp_path):
        out = tmp_path / "benard"
        assert main(["run", "--config", "benard", "--out", str(out)]) == EXIT_OK
        theta = _column(out / "trajectory.csv", "theta_l2")
        u = _column(out / "trajectory.csv", "u_l2")
        # pinned from the first verified run
        assert theta[-1] == pytest.approx(0.2761661340654918, rel=1e-6)
        assert u[-1] == pytest.approx(0.12514260583373918, rel=1e-6)
        # the heat source holds |theta|_g on a plateau instead of letting it decay
        assert theta[512:].min() > 0.8 * theta[0]
        assert json.loads((out / "report.json").read_text())["energy"]["passed"]
