import csv
import os
import subprocess
import sys

import pytest

from transferbench.cli import main
from transferbench.evaluation import fit_log_trend, read_results_csv


def mini_config(experiment, cache_dir, extra=""):
    return f"""
[experiment]
id = {experiment}
seeds = 7

[teacher]
architecture = convnet2
corpus = digits
num_classes = 10
height = 16
width = 16
channels = 1
train_seed = 1
pool_ratio = 0.5
pool_seed = 1234

[dataset]
train_ratio = 0.8
shuffle_seed = 5
fractions = 1.0

[student]
architectures = compact-s
epochs = 4
batch_size = 32
learning_rate = 0.001

[attack]
algorithms = mifgsm
eps = 12/255
steps = 10
mu = 1.0

[run]
cache_dir = {cache_dir}
{extra}
"""


@pytest.fixture(scope="module")
def cache_dir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("cache"))


@pytest.fixture(scope="module")
def single_run(tmp_path_factory, cache_dir):
    root = tmp_path_factory.mktemp("cli-single")
    cfg = root / "single.ini"
    cfg.write_text(mini_config("single", cache_dir))
    out = root / "run"
    assert main(["experiment", "single", "-c", str(cfg), "-o", str(out), "-q"]) == 0
    return cfg, out


@pytest.fixture(scope="module")
def rq3_run(tmp_path_factory, cache_dir):
    root = tmp_path_factory.mktemp("cli-rq3")
    cfg = root / "rq3.ini"
    text = mini_config("rq3", cache_dir).replace(
        "algorithms = mifgsm", "algorithms = fgsm,rfgsm,ffgsm,bim,pgd,tpgd,mifgsm"
    ).replace("eps = 12/255", "eps = 4/255,8/255,12/255,16/255,20/255")
    cfg.write_text(text)
    out = root / "run"
    assert main(["experiment", "rq3", "-c", str(cfg), "-o", str(out), "-q"]) == 0
    return cfg, out


@pytest.fixture(scope="module")
def rq1_run(tmp_path_factory, cache_dir):
    root = tmp_path_factory.mktemp("cli-rq1")
    cfg = root / "rq1.ini"
    cfg.write_text(mini_config("rq1", cache_dir).replace(
        "architectures = compact-s", "architectures = compact-s,compact-l"))
    out = root / "run"
    assert main(["experiment", "rq1", "-c", str(cfg), "-o", str(out), "-q"]) == 0
    return cfg, out


@pytest.fixture(scope="module")
def rq4_run(tmp_path_factory, cache_dir):
    root = tmp_path_factory.mktemp("cli-rq4")
    cfg = root / "rq4.ini"
    cfg.write_text(mini_config("rq4", cache_dir))
    out = root / "run"
    assert main(["experiment", "rq4", "-c", str(cfg), "-o", str(out), "-q"]) == 0
    return cfg, out


@pytest.fixture(scope="module")
def rq2_run(tmp_path_factory, cache_dir):
    root = tmp_path_factory.mktemp("cli-rq2")
    cfg = root / "rq2.ini"
    text = mini_config("rq2", cache_dir).replace(
        "fractions = 1.0", "fractions = 0.0,0.25,0.5,0.75,1.0")
    cfg.write_text(text)
    out = root / "run"
    assert main(["experiment", "rq2", "-c", str(cfg), "-o", str(out), "-q"]) == 0
    return cfg, out


class TestExperimentSingle:
    def test_manifest_written_and_complete(self, single_run):
        _, out = single_run
        manifest = out / "manifest.txt"
        assert manifest.exists()
        text = manifest.read_text()
        assert "[artifacts]" in text and "[config]" in text
        in_artifacts = False
        listed = []
        for line in text.splitlines():
            if line == "[artifacts]":
                in_artifacts = True
            elif line.startswith("["):
                in_artifacts = False
            elif in_artifacts and line.strip():
                listed.append(line.strip())
        assert listed and all(os.path.exists(p) for p in listed)

    def test_single_row_and_p_recomputes(self, single_run):
        _, out = single_run
        rows = read_results_csv(out / "results.csv")
        assert len(rows) == 1
        row = rows[0]
        assert f"{int(row['Q']) / int(row['T']):.4f}" == row["p"]
        assert int(row["Q"]) <= int(row["T"]) <= int(row["M"])

    def test_rerun_fresh_dir_byte_identical(self, single_run, tmp_path):
        cfg, out = single_run
        out2 = tmp_path / "rerun"
        assert main(["experiment", "single", "-c", str(cfg), "-o", str(out2), "-q"]) == 0
        assert (out / "results.csv").read_bytes() == (out2 / "results.csv").read_bytes()

    def test_seed_flag_overrides_config(self, single_run, tmp_path):
        cfg, _ = single_run
        out = tmp_path / "seeded"
        assert main(["experiment", "single", "-c", str(cfg), "-o", str(out),
                     "--seed", "19", "-q"]) == 0
        rows = read_results_csv(out / "results.csv")
        assert len(rows) == 1 and rows[0]["run_id"] == "single-s19"


class TestExperimentRq3:
    def test_grid_of_35_rows(self, rq3_run):
        _, out = rq3_run
        rows = read_results_csv(out / "results.csv")
        assert len(rows) == 35  # 7 algorithms x 5 eps, one seed
        combos = {(r["algorithm"], r["eps"]) for r in rows}
        assert len(combos) == 35

    def test_report_renders_series_plot(self, rq3_run):
        _, out = rq3_run
        assert main(["report", "-o", str(out), "-q"]) == 0
        plot = out / "plots" / "rq3_eps.png"
        assert plot.exists() and plot.stat().st_size > 0
        rows = read_results_csv(out / "results.csv")
        assert len({r["algorithm"] for r in rows}) == 7
        assert len({r["eps"] for r in rows}) == 5

    def test_attack_stats_written(self, rq3_run):
        from fractions import Fraction

        _, out = rq3_run
        with open(out / "attack_stats.csv", newline="") as fh:
            stats = list(csv.DictReader(fh))
        assert len(stats) == 35
        for s in stats:
            eps = float(Fraction(s["eps"]))
            assert float(s["max_linf"]) <= eps + 1e-6
            assert 0.0 <= float(s["mean_abs_perturbation"]) <= eps + 1e-6


class TestExperimentRq2:
    def test_blind_row_flagged(self, rq2_run):
        _, out = rq2_run
        rows = read_results_csv(out / "results.csv")
        assert len(rows) == 5
        blind = [r for r in rows if r["dataset_fraction"] == "0"]
        assert len(blind) == 1 and blind[0]["blind"] == "true"
        assert all(r["blind"] == "false" for r in rows if r["dataset_fraction"] != "0")

    def test_report_fit_matches_fit_log_trend(self, rq2_run):
        from transferbench.report import emit_report

        _, out = rq2_run
        result = emit_report(str(out))
        rows = read_results_csv(out / "results.csv")
        pts = [(float(r["dataset_fraction"]) * 100.0, int(r["Q"]) / int(r["T"]))
               for r in rows if r["blind"] != "true"]
        expected = fit_log_trend(pts)
        assert result["fit"] is not None
        assert result["fit"] == expected
        for p in result["plots"]:
            assert os.path.exists(p)

    def test_students_csv_covers_fractions(self, rq2_run):
        _, out = rq2_run
        with open(out / "students.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        fractions = sorted(float(r["dataset_fraction"]) for r in rows)
        assert fractions == [0.0, 0.25, 0.5, 0.75, 1.0]
        blind_row = [r for r in rows if r["dataset_fraction"] == "0"][0]
        assert blind_row["train_size"] == "0"


class TestExperimentRq1Rq4Reports:
    def test_rq1_rows_and_tier_plot(self, rq1_run):
        _, out = rq1_run
        rows = read_results_csv(out / "results.csv")
        assert {r["student_arch"] for r in rows} == {"compact-s", "compact-l"}
        assert main(["report", "-o", str(out), "-q"]) == 0
        plot = out / "plots" / "rq1_tiers.png"
        assert plot.exists() and plot.stat().st_size > 0

    def test_rq4_rows_and_bar_plot(self, rq4_run):
        _, out = rq4_run
        rows = read_results_csv(out / "results.csv")
        assert [r["blind"] for r in rows] == ["false", "true"]
        assert main(["report", "-o", str(out), "-q"]) == 0
        plot = out / "plots" / "rq4_bars.png"
        assert plot.exists() and plot.stat().st_size > 0
        summary = (out / "plots" / "summary.txt").read_text()
        assert "ratio" in summary


class TestErrorPaths:
    def test_missing_config_exit_1(self, tmp_path):
        assert main(["experiment", "rq3", "-c", str(tmp_path / "none.ini"),
                     "-o", str(tmp_path / "o"), "-q"]) == 1

    def test_config_field_error_names_field(self, tmp_path, cache_dir, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text(mini_config("rq3", cache_dir).replace(
            "architectures = compact-s", "architectures = compact-s,deep-s"))
        assert main(["experiment", "rq3", "-c", str(cfg), "-o",
                     str(tmp_path / "o"), "-q"]) == 1
        assert "student.architectures" in capsys.readouterr().err

    def test_bad_eps_exit_1(self, tmp_path, cache_dir, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text(mini_config("single", cache_dir).replace(
            "eps = 12/255", "eps = twelve"))
        assert main(["experiment", "single", "-c", str(cfg), "-o",
                     str(tmp_path / "o"), "-q"]) == 1
        assert "eps" in capsys.readouterr().err

    def test_eval_before_attack_exit_2(self, tmp_path, cache_dir):
        cfg = tmp_path / "c.ini"
        cfg.write_text(mini_config("single", cache_dir))
        out = tmp_path / "staged"
        assert main(["teacher", "build", "-c", str(cfg), "-o", str(out), "-q"]) == 0
        assert main(["eval", "transfer", "-c", str(cfg), "-o", str(out), "-q"]) == 2

    def test_report_without_results_exit_2(self, tmp_path):
        assert main(["report", "-o", str(tmp_path / "empty"), "-q"]) == 2

    def test_report_empty_rows_error_no_files(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        (out / "results.csv").write_text(
            "run_id,algorithm,eps,alpha,steps,student_arch,dataset_fraction,"
            "blind,M,T,Q,p\n")
        assert main(["report", "-o", str(out), "-q"]) == 2
        assert not (out / "plots").exists() or not os.listdir(out / "plots")


class TestStagedFlow:
    def test_stage_chain_matches_experiment(self, single_run, tmp_path):
        cfg, out = single_run
        staged = tmp_path / "staged"
        for argv in (["teacher", "build"], ["dataset", "label"], ["dataset", "split"],
                     ["student", "train"], ["attack", "run"], ["eval", "transfer"]):
            assert main(argv + ["-c", str(cfg), "-o", str(staged), "-q"]) == 0
        assert (staged / "results.csv").read_bytes() == (out / "results.csv").read_bytes()


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "transferbench.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "experiment" in proc.stdout
