import csv
import json

import numpy as np
import pytest

from redhes import cli
from redhes.verify import dot_product_error
from conftest import two_bus_text


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestExitCodes:
    def test_missing_case_flag(self, capsys):
        code, _, err = run(capsys, "pf")
        assert code == 2
        assert "--case" in err

    def test_unknown_command(self, capsys):
        assert run(capsys, "frobnicate", "--case", "case9")[0] == 2

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "pf", "--case", str(tmp_path / "nope.m"))
        assert code == 2

    def test_corrupt_file_reports_line(self, capsys, tmp_path):
        path = tmp_path / "bad.m"
        path.write_text(two_bus_text(pd=7).replace("\t2\t1\t7", "\t2\t1\tx7"))
        code, _, err = run(capsys, "pf", "--case", str(path))
        assert code == 2
        assert "line 7" in err

    @pytest.mark.parametrize("flags", [["--batch", "0"], ["--threads", "0"], ["--tol", "-1"],
                                       ["--periods", "0"], ["--plot"]])
    def test_invalid_values(self, capsys, flags):
        code, _, err = run(capsys, "hessian", "--case", "case9", *flags)
        assert code == 2
        assert "error" in err

    def test_divergent_power_flow(self, capsys, tmp_path):
        path = tmp_path / "heavy.m"
        path.write_text(two_bus_text(pd=2500))
        code, _, err = run(capsys, "pf", "--case", str(path))
        assert code == 1
        assert "numerical failure" in err

    def test_bad_thread_variable(self, capsys, monkeypatch):
        monkeypatch.setenv("REDHES_THREADS", "many")
        assert run(capsys, "pf", "--case", "case9")[0] == 2


class TestPowerFlow:
    def test_solution_table(self, capsys, tmp_path):
        out = tmp_path / "pf.csv"
        code, stdout, _ = run(capsys, "pf", "--case", "case118", "--out", str(out))
        assert code == 0
        assert "converged" in stdout
        rows = read_csv(out)
        assert len(rows) == 118
        assert set(rows[0]) == set(cli.PF_COLUMNS)

    def test_json(self, capsys, tmp_path):
        out = tmp_path / "pf.json"
        assert run(capsys, "pf", "--case", "case9", "--out", str(out), "--format", "json")[0] == 0
        doc = json.loads(out.read_text())
        assert doc["residual_norm"] <= 1e-8
        assert len(doc["rows"]) == 9
        assert isinstance(doc["rows"][0]["vm"], float)

    def test_stdout_table(self, capsys):
        code, stdout, _ = run(capsys, "pf", "--case", "case9")
        assert code == 0


class TestHessian:
    def test_matrix_and_timings(self, capsys, tmp_path):
        out = tmp_path / "h.csv"
        code, _, _ = run(capsys, "hessian", "--case", "case118", "--batch", "16",
                         "--out", str(out))
        assert code == 0
        H = np.loadtxt(out, delimiter=",")
        assert H.shape == (107, 107)
        stages = [r["stage"] for r in read_csv(tmp_path / "h_timings.csv")]
        assert stages == list(cli.STAGES) + ["total"]

    def test_batch_size_does_not_change_result(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run(capsys, "hessian", "--case", "case118", "--batch", "1", "--out", str(a))[0] == 0
        assert run(capsys, "hessian", "--case", "case118", "--batch", "32", "--threads", "4",
                   "--out", str(b))[0] == 0
        np.testing.assert_allclose(np.loadtxt(a, delimiter=","), np.loadtxt(b, delimiter=","),
                                   rtol=0, atol=1e-12)

    def test_json_and_plots(self, capsys, tmp_path):
        out = tmp_path / "h.json"
        code, _, _ = run(capsys, "hessian", "--case", "case9", "--out", str(out),
                         "--format", "json", "--plot")
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["shape"] == [5, 5]
        assert set(doc["timings_ms"]) == set(cli.STAGES) | {"total"}
        assert (tmp_path / "h_hessian.png").stat().st_size > 0
        assert (tmp_path / "h_stages.png").stat().st_size > 0

    def test_memory_budget(self, capsys):
        code, _, err = run(capsys, "hessian", "--case", "case118", "--batch", "107",
                           "--memory-budget-mb", "0.01")
        assert code == 1
        assert "batch size of at most" in err


class TestVerify:
    def test_case9_passes(self, capsys, tmp_path):
        out = tmp_path / "v.csv"
        code, stdout, _ = run(capsys, "verify", "--case", "case9", "--out", str(out))
        assert code == 0
        assert "all checks passed" in stdout
        rows = read_csv(out)
        names = {r["name"] for r in rows}
        assert {"gradient_vs_fd", "hessian_vs_fd", "adjoint_dot_product"} <= names
        assert all(r["passed"] == "True" for r in rows)

    def test_without_fd(self, capsys):
        code, stdout, _ = run(capsys, "verify", "--case", "case9", "--no-fd")
        assert code == 0
        assert "gradient_vs_fd" not in stdout

    def test_broken_adjoint_is_caught(self, problem9):
        x = problem9.initial_state() + 0.05
        p = problem9.initial_parameters()

        def broken(x_, p_, lam):
            xb, pb = problem9.lagrangian_adjoint(x_, p_, lam, objective_weight=0.0)
            return xb * (1 + 1e-6), pb

        rng = np.random.default_rng(0)
        assert dot_product_error(problem9, x, p, rng) <= 1e-12
        assert dot_product_error(problem9, x, p, rng, residual_adjoint=broken) > 1e-8


class TestBench:
    def test_rows_and_plot(self, capsys, tmp_path):
        out = tmp_path / "bench.csv"
        code, _, _ = run(capsys, "bench", "--case", "case9", "--batches", "1,2,4",
                         "--threads", "2", "--repeat", "1", "--out", str(out), "--plot")
        assert code == 0
        rows = read_csv(out)
        assert tuple(rows[0]) == cli.BENCH_COLUMNS
        # baseline plus one row per swept size
        assert len(rows) == 4
        assert (rows[0]["N"], rows[0]["threads"]) == ("1", "1")
        assert float(rows[0]["time_ratio"]) == 1.0
        assert all(float(r["max_diff"]) <= 1e-12 for r in rows)
        assert (tmp_path / "bench_scaling.png").exists()

    def test_default_sweep(self):
        assert cli.bench_sizes(107) == [1, 2, 4, 8, 16, 32, 64]
        assert cli.bench_sizes(107, 10) == [1, 2, 4, 8]
        assert cli.bench_sizes(1) == [1]


class TestTrack:
    def test_csv_and_plot(self, capsys, tmp_path):
        out = tmp_path / "track.csv"
        code, stdout, _ = run(capsys, "track", "--case", "case9", "--periods", "5",
                              "--oracle", "--out", str(out), "--plot")
        assert code == 0
        rows = read_csv(out)
        assert len(rows) == 5
        assert all(r["status"] == "ok" for r in rows)
        assert "median |p - p*|" in stdout
        assert (tmp_path / "track_tracking.png").exists()

    def test_random_walk_json(self, capsys, tmp_path):
        out = tmp_path / "track.json"
        code, _, _ = run(capsys, "track", "--case", "case9", "--periods", "3", "--scenario",
                         "random-walk", "--seed", "4", "--format", "json", "--out", str(out))
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["scenario"] == "random_walk"
        assert len(doc["rows"]) == 3


class TestConfig:
    def parse(self, *argv):
        return cli.make_config(cli.build_parser().parse_args(list(argv)))

    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("REDHES_THREADS", raising=False)
        cfg = self.parse("hessian", "--case", "case9")
        assert (cfg.batch, cfg.threads, cfg.tol, cfg.format) == (16, 1, 1e-8, "csv")

    def test_precedence(self, tmp_path, monkeypatch):
        monkeypatch.setenv("REDHES_THREADS", "3")
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"batch": 8, "threads": 2, "case": "case30"}))
        cfg = self.parse("hessian", "--case", "case9", "--config", str(conf))
        assert (cfg.case, cfg.batch, cfg.threads) == ("case9", 8, 2)
        cfg = self.parse("hessian", "--config", str(conf), "--batch", "4")
        assert (cfg.case, cfg.batch) == ("case30", 4)

    def test_environment_threads(self, monkeypatch):
        monkeypatch.setenv("REDHES_THREADS", "5")
        assert self.parse("pf", "--case", "case9").threads == 5
        assert self.parse("pf", "--case", "case9", "--threads", "2").threads == 2

    def test_unknown_key(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"bach": 8}))
        with pytest.raises(cli.UsageError, match="bach"):
            self.parse("pf", "--case", "case9", "--config", str(conf))

    def test_unreadable_config(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text("{not json")
        with pytest.raises(cli.UsageError):
            self.parse("pf", "--case", "case9", "--config", str(conf))
