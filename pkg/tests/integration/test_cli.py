import io
import json

import pytest
from rich.console import Console

from src.cli.app import EXIT_FAILURE, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, EoprCLI
from src.core.panel import load_panel
from src.utils.reporter import read_table


def run_cli(*argv):
    cli = EoprCLI(console=Console(file=io.StringIO(), width=200))
    return cli.run([str(a) for a in argv])


# Fixtures
@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("EOPR_CONFIG", raising=False)
    monkeypatch.delenv("EOPR_THREADS", raising=False)


@pytest.fixture
def simulated(tmp_path):
    """Panel and truth files written by the simulate command"""
    out = tmp_path / "sim"
    code = run_cli("simulate", "--n-units", 8, "--t-total", 40, "--t0", 20,
                   "--seed", 3, "--out", out)
    assert code == EXIT_OK
    return out


def fit_args(simulated, out, *extra):
    return ("fit", "--input", simulated / "panel.csv", "--treated", "treated",
            "--t0", 20, "--out", out) + extra


def snapshot(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


# Test simulate
class TestSimulateCommand:

    def test_writes_panel_truth_and_metadata(self, simulated):
        panel = load_panel(simulated / "panel.csv", "wide", "treated", 20)
        truth = load_panel(simulated / "truth.csv", "wide", "treated", 20)
        meta = json.loads((simulated / "metadata.json").read_text())

        assert panel.n_units == 8
        assert truth.t_total == 40
        assert meta["schema"] == "simulation"
        assert meta["seed"] == 3

    def test_invalid_horizon(self, tmp_path):
        code = run_cli("simulate", "--t-total", 10, "--t0", 10, "--out", tmp_path / "x")

        assert code == EXIT_VALIDATION

    def test_rerun_is_byte_identical(self, simulated):
        first = snapshot(simulated)
        run_cli("simulate", "--n-units", 8, "--t-total", 40, "--t0", 20, "--seed", 3,
                "--out", simulated)

        assert snapshot(simulated) == first

    def test_zero_noise_panel_equals_truth(self, tmp_path):
        out = tmp_path / "sim"
        code = run_cli("simulate", "--n-units", 6, "--t-total", 30, "--t0", 15,
                       "--noise-sigma", 0, "--out", out)

        assert code == EXIT_OK
        assert (out / "panel.csv").read_bytes() == (out / "truth.csv").read_bytes()


# Test fit
class TestFitCommand:

    def test_all_methods(self, simulated, tmp_path):
        out = tmp_path / "fit"
        code = run_cli(*fit_args(simulated, out, "--truth", simulated / "truth.csv"))

        assert code == EXIT_OK
        for method in ("eopr", "sc", "dsc", "rsc"):
            table = read_table(out / f"estimate_{method}.csv")
            assert table["schema"] == "estimate"
            assert len(table["rows"]) == 40
        band = read_table(out / "band_eopr.csv")
        assert band["schema"] == "band"
        assert not (out / "band_sc.csv").exists()

        scores = read_table(out / "scores.csv")["rows"]
        assert len(scores) == 8
        assert {row["reference"] for row in scores} == {"observed", "truth"}

        effects = read_table(out / "effects.csv")["rows"]
        assert len(effects) == 4 * 20

        summary = json.loads((out / "fit_summary.json").read_text())
        assert summary["schema"] == "fit_summary"
        assert summary["methods"]["eopr"]["diagnostics"]["selected_lambda"] > 0
        assert set(summary["methods"]["sc"]["weights"]) == {f"control_{i:03d}" for i in range(1, 8)}

    def test_donor_subset(self, simulated, tmp_path):
        out = tmp_path / "fit"
        code = run_cli(*fit_args(simulated, out, "--methods", "sc,eopr", "--truth",
                                 simulated / "truth.csv", "--controls", "control_003,control_001"))

        assert code == EXIT_OK
        summary = json.loads((out / "fit_summary.json").read_text())
        assert summary["panel"]["n_units"] == 3
        assert set(summary["methods"]["sc"]["weights"]) == {"control_001", "control_003"}
        assert summary["config"]["controls"] == ["control_003", "control_001"]

    def test_unknown_donor(self, simulated, tmp_path):
        out = tmp_path / "fit"
        code = run_cli(*fit_args(simulated, out, "--controls", "control_001,Control_002"))

        assert code == EXIT_VALIDATION
        assert not out.exists()

    def test_baseline_rows_have_empty_band(self, simulated, tmp_path):
        out = tmp_path / "fit"
        run_cli(*fit_args(simulated, out, "--methods", "sc"))

        row = read_table(out / "estimate_sc.csv")["rows"][0]
        assert row["band_lower"] == ""
        assert row["method"] == "sc"

    def test_rerun_is_byte_identical(self, simulated, tmp_path):
        out = tmp_path / "fit"
        run_cli(*fit_args(simulated, out))
        first = snapshot(out)
        run_cli(*fit_args(simulated, out))

        assert snapshot(out) == first

    def test_json_lines(self, simulated, tmp_path):
        out = tmp_path / "fit"
        code = run_cli(*fit_args(simulated, out, "--methods", "eopr", "--format", "json-lines"))

        assert code == EXIT_OK
        first = json.loads((out / "estimate_eopr.jsonl").read_text().splitlines()[0])
        assert first == {"schema": "estimate", "version": 1}

    def test_config_file(self, simulated, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"methods": ["dsc"], "normalize": "none"}))
        out = tmp_path / "fit"

        assert run_cli(*fit_args(simulated, out, "--config", config)) == EXIT_OK
        assert sorted(p.name for p in out.glob("estimate_*")) == ["estimate_dsc.csv"]

    def test_missing_input_writes_nothing(self, tmp_path):
        out = tmp_path / "fit"
        code = run_cli("fit", "--input", tmp_path / "nope.csv", "--treated", "treated",
                       "--t0", 5, "--out", out)

        assert code == EXIT_VALIDATION
        assert not out.exists()

    def test_bad_t0(self, simulated, tmp_path):
        code = run_cli("fit", "--input", simulated / "panel.csv", "--treated", "treated",
                       "--t0", 40, "--out", tmp_path / "fit")

        assert code == EXIT_VALIDATION

    def test_unknown_treated(self, simulated, tmp_path):
        code = run_cli("fit", "--input", simulated / "panel.csv", "--treated", "nobody",
                       "--t0", 20, "--out", tmp_path / "fit")

        assert code == EXIT_VALIDATION

    def test_missing_required_flag(self, simulated, tmp_path):
        code = run_cli("fit", "--input", simulated / "panel.csv", "--t0", 20,
                       "--out", tmp_path / "fit")

        assert code == EXIT_VALIDATION

    def test_numerical_failure(self, tmp_path):
        path = tmp_path / "flat.csv"
        path.write_text("unit,1,2,3,4\ntreated,0,0,1,1\na,1,2,3,4\nb,2,1,2,1\n")
        out = tmp_path / "fit"

        assert run_cli("fit", "--input", path, "--treated", "treated", "--t0", 2,
                       "--out", out) == EXIT_NUMERICAL
        assert not out.exists()

    def test_log_dir(self, simulated, tmp_path):
        logs = tmp_path / "logs"
        run_cli(*fit_args(simulated, tmp_path / "fit", "--methods", "sc", "--log-dir", logs))

        assert (logs / "errors").is_dir()
        assert any(logs.glob("*.json"))

    def test_unexpected_error(self, simulated, tmp_path, mocker):
        mocker.patch.object(EoprCLI, "cmd_fit", side_effect=RuntimeError("boom"))

        assert run_cli(*fit_args(simulated, tmp_path / "fit")) == EXIT_FAILURE

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as excinfo:
            run_cli("scan")
        assert excinfo.value.code == 2


# Test placebo
class TestPlaceboCommand:

    def test_injected_effect_ranks_first(self, simulated, tmp_path):
        out = tmp_path / "placebo"
        code = run_cli("placebo", "--input", simulated / "panel.csv", "--treated", "treated",
                       "--t0", 20, "--methods", "sc", "--effect-shape", "step",
                       "--effect-magnitude", 50, "--out", out)

        assert code == EXIT_OK
        gaps = read_table(out / "placebo_sc.csv")
        assert gaps["schema"] == "placebo"
        assert len(gaps["rows"]) == 8 * 40

        summary = read_table(out / "placebo_summary_sc.csv")["rows"]
        treated = [row for row in summary if row["is_treated"] == "true"]
        assert len(treated) == 1
        assert treated[0]["rank"] == "1"

    def test_threads_do_not_change_output(self, simulated, tmp_path):
        outputs = []
        for threads in (1, 4):
            out = tmp_path / f"placebo_{threads}"
            run_cli("placebo", "--input", simulated / "panel.csv", "--treated", "treated",
                    "--t0", 20, "--methods", "sc", "--threads", threads, "--out", out)
            outputs.append({p.name: p.read_bytes() for p in out.iterdir()})

        assert outputs[0] == outputs[1]

    def test_donor_subset(self, simulated, tmp_path):
        out = tmp_path / "placebo"
        code = run_cli("placebo", "--input", simulated / "panel.csv", "--treated", "treated",
                       "--t0", 20, "--methods", "sc", "--controls", "control_001,control_002,control_005",
                       "--out", out)

        assert code == EXIT_OK
        summary = read_table(out / "placebo_summary_sc.csv")["rows"]
        assert {row["unit"] for row in summary} == {"treated", "control_001", "control_002", "control_005"}


# Test ablate
class TestAblateCommand:

    def test_grid_with_zero(self, simulated, tmp_path):
        out = tmp_path / "ablate"
        code = run_cli("ablate", "--input", simulated / "panel.csv", "--treated", "treated",
                       "--t0", 20, "--ablation-grid", "0,0.01,1", "--out", out)

        assert code == EXIT_OK
        rows = read_table(out / "ablation.csv")["rows"]
        assert [float(row["lambda"]) for row in rows] == [0.0, 0.01, 1.0]

    def test_truth_reference_needs_truth(self, simulated, tmp_path):
        code = run_cli("ablate", "--input", simulated / "panel.csv", "--treated", "treated",
                       "--t0", 20, "--reference", "truth", "--out", tmp_path / "ablate")

        assert code == EXIT_VALIDATION

    def test_truth_reference(self, simulated, tmp_path):
        out = tmp_path / "ablate"
        code = run_cli("ablate", "--input", simulated / "panel.csv", "--treated", "treated",
                       "--t0", 20, "--reference", "truth", "--truth", simulated / "truth.csv",
                       "--ablation-grid", "0.1", "--out", out)

        assert code == EXIT_OK
        assert len(read_table(out / "ablation.csv")["rows"]) == 1

    def test_rerun_is_byte_identical(self, simulated, tmp_path):
        out = tmp_path / "ablate"
        argv = ("ablate", "--input", simulated / "panel.csv", "--treated", "treated",
                "--t0", 20, "--ablation-grid", "0,0.01,1", "--out", out)
        run_cli(*argv)
        first = snapshot(out)
        run_cli(*argv, "--threads", 1)

        assert snapshot(out) == first


# Test sweep
class TestSweepCommand:

    def test_yaml_configs(self, tmp_path):
        sweep_file = tmp_path / "sweep.yaml"
        sweep_file.write_text("- {n_units: 5, t_total: 30, t0: 15}\n- {n_units: 6, t_total: 30, t0: 10}\n")
        out = tmp_path / "sweep"

        code = run_cli("sweep", "--sweep-config", sweep_file, "--repeats", 2, "--methods", "sc,dsc",
                       "--out", out)

        assert code == EXIT_OK
        rows = read_table(out / "sweep.csv")["rows"]
        assert len(rows) == 4
        assert all(row["ok"] == "2" for row in rows)
        assert len(read_table(out / "sweep_runs.csv")["rows"]) == 8

    def test_rerun_is_byte_identical(self, tmp_path):
        sweep_file = tmp_path / "sweep.yaml"
        sweep_file.write_text("- {n_units: 5, t_total: 30, t0: 15}\n")
        out = tmp_path / "sweep"
        argv = ("sweep", "--sweep-config", sweep_file, "--repeats", 3, "--methods", "eopr,sc",
                "--out", out)
        run_cli(*argv)
        first = snapshot(out)
        run_cli(*argv, "--threads", 1)

        assert snapshot(out) == first

    def test_needs_a_source(self, tmp_path):
        assert run_cli("sweep", "--out", tmp_path / "sweep") == EXIT_VALIDATION

    def test_unknown_yaml_key(self, tmp_path):
        sweep_file = tmp_path / "sweep.yaml"
        sweep_file.write_text("- {n_units: 5, t_total: 30, t0: 15, rank: 2}\n")

        assert run_cli("sweep", "--sweep-config", sweep_file, "--out", tmp_path / "s") == EXIT_VALIDATION

    def test_missing_yaml(self, tmp_path):
        code = run_cli("sweep", "--sweep-config", tmp_path / "none.yaml", "--out", tmp_path / "s")

        assert code == EXIT_VALIDATION


# Test align
class TestAlignCommand:

    @pytest.fixture
    def dated(self, tmp_path):
        series = tmp_path / "series.csv"
        rows = ["unit,time,value"]
        for unit in ("A", "B", "C"):
            rows.extend(f"{unit},2020-03-{day:02d},{day}" for day in range(1, 21))
        series.write_text("\n".join(rows) + "\n")
        dates = tmp_path / "dates.csv"
        dates.write_text("unit,intervention_date\nA,2020-03-10\nB,2020-03-05\nC,2020-03-12\n")
        return series, dates

    def test_aligned_panel(self, dated, tmp_path):
        series, dates = dated
        out = tmp_path / "align"
        code = run_cli("align", "--input", series, "--dates", dates, "--treated", "A",
                       "--pre-days", 3, "--post-days", 2, "--smoothing-window", 1,
                       "--no-increments", "--out", out)

        assert code == EXIT_OK
        panel = load_panel(out / "aligned_panel.csv", "wide", "A", 3)
        assert panel.time_labels == (-3, -2, -1, 0, 1)
        assert list(panel.treated) == [7.0, 8.0, 9.0, 10.0, 11.0]

        meta = json.loads((out / "alignment.json").read_text())
        assert meta["intervention_dates"]["B"] == "2020-03-05"

    def test_insufficient_history(self, dated, tmp_path):
        series, dates = dated
        code = run_cli("align", "--input", series, "--dates", dates, "--treated", "A",
                       "--pre-days", 6, "--post-days", 2, "--out", tmp_path / "align")

        assert code == EXIT_VALIDATION

    def test_rerun_is_byte_identical(self, dated, tmp_path):
        series, dates = dated
        out = tmp_path / "align"
        argv = ("align", "--input", series, "--dates", dates, "--treated", "A",
                "--pre-days", 3, "--post-days", 2, "--smoothing-window", 2, "--out", out)
        assert run_cli(*argv) == EXIT_OK
        first = snapshot(out)
        run_cli(*argv)

        assert snapshot(out) == first
