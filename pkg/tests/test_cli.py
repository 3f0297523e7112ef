from __future__ import annotations

import csv
import json

import pytest

from rotorwalk import cli
from rotorwalk.config import ExperimentConfig, loads, parse_environment
from rotorwalk.engine import GaltonWatson, Regular
from rotorwalk.errors import ConfigError


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# tool=rotorwalk")
    return list(csv.DictReader(lines[1:]))


def write_cfg(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


class TestConfig:
    def test_defaults_valid(self):
        cfg = ExperimentConfig().validate()
        assert isinstance(cfg.env_spec(), Regular)
        assert cfg.stride == 1000

    def test_rational_strings(self):
        spec = parse_environment({"tree": "regular", "d": 2, "r": ["0", "1/2", "1/2"]})
        assert spec.law.r == (0.0, 0.5, 0.5)

    def test_gw_rows(self):
        spec = parse_environment({"tree": "galton-watson", "offspring": {"1": 0.5, "3": 0.5},
                                  "Q": {"1": [0.5, 0.5], "3": [0.25, 0.25, 0.25, 0.25]}})
        assert isinstance(spec, GaltonWatson) and spec.off.support == (1, 3)

    @pytest.mark.parametrize("text, where", [
        ('{"n_steps": 0}', "n_steps"),
        ('{"walk": "levy"}', "walk"),
        ('{"bogus": 1}', "bogus"),
        ('{"environment": {"tree": "regular", "d": 2, "r": [0.5, 0.5]}}', "environment"),
        ('{"environment": {"tree": "gw", "offspring": {"1": 1.0}, "Q": {"2": [0.5, 0.2, 0.3]}}}', "environment"),
        ('{"contour": {"k": 0}}', "contour.k"),
        ('{"sweep": {"p_grid": [1.5]}}', "sweep.p_grid"),
    ])
    def test_field_errors(self, text, where):
        with pytest.raises(ConfigError, match=where):
            loads(text).validate()

    def test_json_error_has_position(self):
        with pytest.raises(ConfigError, match=r"line 2, column \d+"):
            loads('{"seed": 1,\n "n_steps": }')

    def test_hash_ignores_threads_and_out(self):
        a = ExperimentConfig(threads=1, out="x")
        b = ExperimentConfig(threads=4, out="y")
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != ExperimentConfig(seed=1).config_hash()


class TestCommands:
    def test_table(self, tmp_path, capsys):
        assert cli.main(["table", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "table.csv")
        assert [r["d"] for r in rows] == [str(d) for d in range(2, 11)]
        assert (rows[0]["alpha"], rows[0]["srw_limit"]) == ("0.500", "0.500")
        assert rows[-1]["srw_limit"] == "0.900"
        assert "0.707" in capsys.readouterr().out

    def test_table_range(self, tmp_path):
        assert cli.main(["table", "--d-min", "3", "--d-max", "4", "--out", str(tmp_path)]) == 0
        assert [r["d"] for r in read_csv(tmp_path / "table.csv")] == ["3", "4"]

    def test_constants_null(self, tmp_path):
        cfg = write_cfg(tmp_path, {"environment": {"tree": "regular", "d": 2, "rotor": "uniform"}})
        assert cli.main(["constants", "--config", cfg, "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "constants.json").read_text())
        assert rep["regime"] == "NullRecurrent"
        assert (rep["alpha"], rep["ell"]) == (0.5, 0.0)
        assert rep["provenance"]["config_hash"]

    def test_constants_gw(self, tmp_path):
        cfg = write_cfg(tmp_path, {"environment": {"tree": "gw", "offspring": {"1": 0.4, "2": 0.6}}})
        assert cli.main(["constants", "--config", cfg, "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "constants.json").read_text())
        assert rep["alpha"] == pytest.approx(0.375)

    def test_constants_printed_audit(self, tmp_path):
        assert cli.main(["constants", "--out", str(tmp_path)]) == 0
        audit = json.loads((tmp_path / "constants.json").read_text())["printed_formula_audit"]
        assert audit["proof_level_matches_table"] is True
        assert audit["alpha_printed_matches_table"] is False

    def test_simulate(self, tmp_path):
        cfg = write_cfg(tmp_path, {"environment": {"tree": "regular", "d": 2, "r": [0, 0.5, 0.5]},
                                   "n_steps": 20000, "replicas": 3})
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path), "--threads", "2"]) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["completed"] == 3 and summary["identity_audit_ok"]
        rows = read_csv(tmp_path / "replica_0002.csv")
        assert list(rows[0]) == ["n", "range", "depth"]
        assert rows[-1]["n"] == "20000"

    def test_simulate_returns_strict_truncation(self, tmp_path):
        args = ["simulate", "--out", str(tmp_path), "--replicas", "2", "--steps", "5000"]
        cfg = write_cfg(tmp_path, {"mode": "returns", "k_returns": 100})
        assert cli.main(args + ["--config", cfg]) == 0
        assert cli.main(args + ["--config", cfg, "--strict"]) == 3

    def test_budget_failure_reported(self, tmp_path):
        cfg = write_cfg(tmp_path, {"node_budget": 100, "n_steps": 10000, "replicas": 2})
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["failed"] == 2
        assert "budget" in summary["per_replica"][0]["error"]
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path), "--strict"]) == 3

    def test_config_error_exit(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"replicas": 0})
        assert cli.main(["simulate", "--config", cfg]) == 2
        assert "replicas" in capsys.readouterr().err

    def test_gw_sweep(self, tmp_path):
        cfg = write_cfg(tmp_path, {"sweep": {"families": [2], "p_grid": [0.0, 0.5, 1.0],
                                             "replicas": 2, "n_steps": 20000}})
        assert cli.main(["gw-sweep", "--config", cfg, "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "gw_sweep.csv")
        kinds = [r["kind"] for r in rows]
        assert kinds == ["point", "point", "degenerate", "regular-endpoint"]
        assert float(rows[0]["alpha_analytic"]) == 0.5
        assert rows[0]["regime"] == "NullRecurrent"
        assert rows[2]["status"].startswith("degenerate")
        assert float(rows[1]["mu"]) == 1.5

    def test_contour(self, tmp_path):
        cfg = write_cfg(tmp_path, {"environment": {"tree": "regular", "d": 2, "rotor": "uniform"},
                                   "contour": {"k": 4, "L": 8}})
        assert cli.main(["contour", "--config", cfg, "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "contour_analytic.csv")
        assert len(rows) == 4 * 2**8
        at_zero = [r for r in rows if r["cell_index"] == "0"]
        assert [float(r["value"]) for r in at_zero] == [3.0, 6.0, 9.0, 12.0]
        assert all(float(r["normalized"]) == 3.0 for r in at_zero)

    def test_contour_empirical(self, tmp_path):
        cfg = write_cfg(tmp_path, {"environment": {"tree": "regular", "d": 2, "rotor": "uniform"},
                                   "contour": {"k": 1, "L": 2, "replicas": 300}})
        assert cli.main(["contour", "--config", cfg, "--empirical", "--out", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "contour_summary.json").read_text())
        assert summary["completed"] == 300 and summary["max_abs_z"] < 4

    def test_contour_transient_is_formal(self, tmp_path):
        assert cli.main(["contour", "--k", "2", "--L", "3", "--out", str(tmp_path)]) == 0
        assert "formal=True" in (tmp_path / "contour_analytic.csv").read_text().splitlines()[0]
        assert cli.main(["contour", "--k", "1", "--L", "3", "--empirical", "--out", str(tmp_path)]) == 2

    def test_audit(self, tmp_path):
        assert cli.main(["audit", "--replicas", "2", "--steps", "100000", "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "audit.json").read_text())
        assert rep["ok"] and len(rep["environments"]) == len(cli.AUDIT_SUITE) + 1

    def test_deterministic_bytes(self, tmp_path):
        cfg = write_cfg(tmp_path, {"n_steps": 30000, "replicas": 3})
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["simulate", "--config", cfg, "--out", str(a), "--threads", "1"]) == 0
        assert cli.main(["simulate", "--config", cfg, "--out", str(b), "--threads", "3"]) == 0
        for f in sorted(a.iterdir()):
            assert f.read_bytes() == (b / f.name).read_bytes()
