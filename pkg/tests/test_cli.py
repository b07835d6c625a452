import hashlib
import json
import shutil
import subprocess
import sys

import pytest

from wavelab.cli import main
from wavelab.config import SCHEMA, parse_config, parse_functional
from wavelab.errors import ConfigError

SMALL_WAVE = """
[run]
ensemble = 24
path_files = 2
[wave]
nu = 0.02
K = 4
dt = 0.005
T = 0.05
"""


def run_cli(tmp_path, command, text, *extra, name="out"):
    cfg = tmp_path / f"{name}.toml"
    cfg.write_text(text)
    out = tmp_path / name
    code = main([command, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def snapshot(out):
    files = {p.name: p.read_bytes() for p in out.iterdir() if p.name != "manifest.json"}
    m = manifest(out)
    m.pop("wall_clock_seconds")
    return files, m


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg.tables == SCHEMA and cfg.model == "wave"

    def test_roundtrip(self):
        cfg = parse_config("[wave]\nnu = 0.02\nK = 6\n[noise]\nb = [1.0, 0.5]\n")
        again = parse_config(cfg.emit())
        assert again.tables == cfg.tables and again.hash() == cfg.hash()

    def test_int_promoted_to_float(self):
        assert parse_config("[wave]\nT = 1\n")["wave"]["T"] == 1.0

    @pytest.mark.parametrize("text", [
        "[bogus]\nx = 1\n", "[wave]\nbogus = 1\n", "[wave]\nK = 1.5\n", "[wave]\nnu = 'a'\n",
        "[wave]\nnu = 2.0\n", "[wave]\nscheme = 'rk4'\n", "[weak_error]\nnu_grid = [0.1, 0.05]\n",
        "[ssm]\nK_ssm = 4\n", "[residual]\nmode = 'spectral'\n", "wave = 3\n", "[wave\n",
        "[run]\nmodel = 'heat'\n", "[weak_error]\nfunctionals = ['cube:1']\n",
    ])
    def test_rejections(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_functionals(self):
        assert parse_functional("proj:2", 4) == ("projection", 2)
        assert parse_functional("square:1", 4) == ("squared-projection", 1)
        assert parse_functional("l2sq", 4) == ("squared-norm", None)
        with pytest.raises(ConfigError):
            parse_functional("proj:9", 4)


class TestExitCodes:
    def test_unknown_key(self, tmp_path):
        code, out = run_cli(tmp_path, "simulate", "[wave]\nbogus = 1\n")
        assert code == 2 and not out.exists()

    def test_missing_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "none.toml")]) == 2

    def test_bad_threads(self, tmp_path):
        code, _ = run_cli(tmp_path, "simulate", SMALL_WAVE, "--threads", "0")
        assert code == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_blow_up(self, tmp_path):
        text = SMALL_WAVE.replace("T = 0.05", "T = 3.0") + "cubic_coeff = -1.0\nbeta = 5.0\nu0 = [3.0]\n"
        code, out = run_cli(tmp_path, "simulate", text)
        assert code == 3
        m = manifest(out)
        assert m["exit_code"] == 3 and m["abort_counts"]["wave"] == 24

    def test_check_failure(self, tmp_path):
        code, out = run_cli(tmp_path, "ssm-residual", "[residual]\nslope_min = 6.0\nslope_max = 7.0\n")
        assert code == 4 and manifest(out)["status"] == "check failed"


class TestSimulate:
    def test_outputs_and_manifest(self, tmp_path):
        code, out = run_cli(tmp_path, "simulate", SMALL_WAVE)
        assert code == 0
        names = {p.name for p in out.iterdir()}
        assert {"traj_00000.csv", "traj_00001.csv", "ensemble_mean.csv", "ensemble_var.csv",
                "manifest.json"} <= names
        m = manifest(out)
        assert m["command"] == "simulate" and m["config"] == (tmp_path / "out.toml").read_text()
        for name, digest in m["files"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
        rows = (out / "traj_00000.csv").read_text().splitlines()
        assert rows[0].startswith("t,u_1") and len(rows) == 12

    def test_T_zero_single_row(self, tmp_path):
        code, out = run_cli(tmp_path, "simulate", SMALL_WAVE.replace("T = 0.05", "T = 0.0"))
        assert code == 0
        assert len((out / "traj_00000.csv").read_text().splitlines()) == 2

    def test_rerun_identical(self, tmp_path):
        code, out = run_cli(tmp_path, "simulate", SMALL_WAVE, "--seed", "5")
        first = snapshot(out)
        shutil.rmtree(out)
        code2, out = run_cli(tmp_path, "simulate", SMALL_WAVE, "--seed", "5")
        assert code == code2 == 0 and snapshot(out) == first

    def test_threads_identical(self, tmp_path):
        _, a = run_cli(tmp_path, "simulate", SMALL_WAVE, "--threads", "1", name="a")
        _, b = run_cli(tmp_path, "simulate", SMALL_WAVE, "--threads", "3", name="b")
        for name in ("ensemble_mean.csv", "ensemble_var.csv", "traj_00001.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        _, a = run_cli(tmp_path, "simulate", SMALL_WAVE, "--seed", "1", name="a")
        _, b = run_cli(tmp_path, "simulate", SMALL_WAVE, "--seed", "2", name="b")
        assert (a / "ensemble_mean.csv").read_bytes() != (b / "ensemble_mean.csv").read_bytes()

    def test_fast_frozen(self, tmp_path):
        text = "[run]\nmodel = 'fast-frozen'\nensemble = 2\n[wave]\nK = 3\nT = 0.1\n"
        code, out = run_cli(tmp_path, "simulate", text)
        assert code == 0 and (out / "traj_00001.csv").exists()

    def test_ssm(self, tmp_path):
        text = "[run]\nmodel = 'ssm'\nensemble = 2\n[ssm]\nsigma = 0.1\nT = 0.05\n"
        code, out = run_cli(tmp_path, "simulate", text)
        assert code == 0
        assert (out / "traj_00000.csv").read_text().startswith("t,a,a_bar,u_1")


class TestAnalyses:
    def test_weak_error_self_comparison(self, tmp_path):
        text = SMALL_WAVE + "[weak_error]\nfull_model = 'averaged'\nnu_grid = [0.04, 0.02, 0.01]\n"
        code, out = run_cli(tmp_path, "weak-error", text)
        assert code == 0
        rows = read_jsonl(out / "weak_error.jsonl")
        assert len(rows) == 3 and all(r["diff"] == 0.0 for r in rows)
        assert read_jsonl(out / "order_fit.jsonl")[0]["refused"] is True

    def test_fast_ou_stats(self, tmp_path):
        text = ("[wave]\nK = 2\nnu = 0.05\n[fast_ou]\npaths = 4\nhorizon_nu = 100.0\n"
                "burn_in_nu = 10.0\nvar_rtol = 0.5\nmean_se = 5.0\n")
        code, out = run_cli(tmp_path, "fast-ou-stats", text)
        assert code == 0
        assert len(read_jsonl(out / "fast_ou_stats.jsonl")) == 4

    def test_martingale_qv(self, tmp_path):
        text = ("[run]\nensemble = 100\n[wave]\nK = 2\nnu = 0.02\ndt = 0.002\nT = 0.5\n"
                "[martingale]\nslope_rtol = 0.2\nr2_min = 0.9\n")
        code, out = run_cli(tmp_path, "martingale-qv", text)
        assert code == 0
        rec = read_jsonl(out / "martingale_qv.jsonl")[0]
        assert abs(rec["slope"] - 1.0) < 0.2 and (out / "qv.csv").exists()

    def test_ssm_residual(self, tmp_path):
        code, out = run_cli(tmp_path, "ssm-residual", "")
        assert code == 0
        assert abs(read_jsonl(out / "ssm_residual.jsonl")[-1]["slope"] - 5.0) < 0.3

    def test_ssm_compare(self, tmp_path):
        text = "[ssm]\nsigma = 0.1\nT = 0.2\n[compare]\nsamples = 200\n"
        code, out = run_cli(tmp_path, "ssm-compare", text)
        assert code == 0 and (out / "ssm_compare.jsonl").exists()


def test_console_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "wavelab.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
