import json
from pathlib import Path

import numpy as np
import pytest

from glmar import cli
from glmar import io as gio
from glmar.summary import PosteriorSummary


def run(argv):
    return cli.main(argv)


def tiny_sim(tmp_path, seed=3, reps=2, name="scen"):
    out = tmp_path / name
    code = run([
        "simulate", "--preset", "study1", "--scale", "desk", "--seed", str(seed),
        "--reps", str(reps), "--out", str(out),
    ])
    assert code == 0
    return out


def dir_bytes(root: Path, skip=("timing.json",)) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    return tiny_sim(tmp, seed=3, reps=2)


@pytest.fixture(scope="module")
def fits(scenario, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("fits")
    hmc_out = tmp / "hmc"
    vb_out = tmp / "vb"
    code = run([
        "fit", "--scenario", str(scenario), "--backend", "hmc",
        "--out", str(hmc_out), "--iters", "40", "--burn", "24",
        "--leapfrog-steps", "5", "--seed", "1", "--workers", "1",
    ])
    assert code == 0
    code = run([
        "fit", "--scenario", str(scenario), "--backend", "vb",
        "--out", str(vb_out), "--max-iter", "40", "--tol", "1e-4",
        "--seed", "1", "--workers", "1",
    ])
    assert code == 0
    return hmc_out, vb_out


class TestSimulateCommand:
    def test_writes_bundles_truth_manifest(self, scenario):
        reps = sorted(p.name for p in scenario.glob("rep_*"))
        assert reps == ["rep_000", "rep_001"]
        for rep in reps:
            d = scenario / rep
            for name in ("design.csv", "mask.txt", "series.f64", "meta.txt",
                         "truth.csv"):
                assert (d / name).exists()
        assert (scenario / "manifest.json").exists()
        doc = json.loads((scenario / "scenario.json").read_text())
        assert doc["N"] == 400 and doc["K"] == 5 and doc["P"] == 1

    def test_rerun_same_seed_byte_identical(self, tmp_path):
        a = tiny_sim(tmp_path, seed=9, reps=2, name="a")
        b = tiny_sim(tmp_path, seed=9, reps=2, name="b")
        assert dir_bytes(a) == dir_bytes(b)

    def test_refuses_nonempty_without_force(self, tmp_path):
        out = tiny_sim(tmp_path, seed=1, reps=1, name="x")
        code = run([
            "simulate", "--preset", "study1", "--reps", "1",
            "--seed", "1", "--out", str(out),
        ])
        assert code == 1
        code = run([
            "simulate", "--preset", "study1", "--reps", "1",
            "--seed", "1", "--out", str(out), "--force",
        ])
        assert code == 0

    def test_unknown_preset_usage_error(self, tmp_path):
        assert run([
            "simulate", "--preset", "studyX", "--out", str(tmp_path / "y")
        ]) == 1


class TestFitCommand:
    def test_hmc_outputs(self, fits, scenario):
        hmc_out, _ = fits
        rep = hmc_out / "rep_000"
        assert (rep / "summary.csv").exists()
        assert (rep / "draws_w.bin").exists()
        assert (rep / "diagnostics.csv").exists()
        assert (rep / "manifest.json").exists()
        assert (rep / "timing.json").exists()
        traces = list((rep / "traces").glob("*.csv"))
        names = {t.stem for t in traces}
        assert any(n.startswith("alpha") for n in names)
        assert any(n.startswith("beta") for n in names)
        summary = PosteriorSummary.read_csv(rep / "summary.csv", 400, 5, 1)
        assert summary.w_var is not None

    def test_vb_outputs(self, fits):
        _, vb_out = fits
        rep = vb_out / "rep_001"
        assert (rep / "summary.csv").exists()
        assert (rep / "cov_w.bin").exists()
        fe = (rep / "free_energy.csv").read_text().splitlines()
        assert fe[0] == "iteration,free_energy"
        vals = [float(line.split(",")[1]) for line in fe[1:]]
        assert all(b - a >= -1e-8 for a, b in zip(vals, vals[1:]))
        conv = (rep / "convergence.txt").read_text()
        assert "converged=" in conv

    def test_ols_point_estimates_only(self, scenario, tmp_path):
        out = tmp_path / "ols"
        code = run([
            "fit", "--bundle", str(scenario / "rep_000"), "--backend", "ols",
            "--out", str(out),
        ])
        assert code == 0
        summary = PosteriorSummary.read_csv(out / "summary.csv", 400, 5, 1)
        assert summary.w_var is None and summary.w_bmse is None

    def test_missing_bundle_is_data_error(self, tmp_path):
        code = run([
            "fit", "--bundle", str(tmp_path / "nope"), "--backend", "ols",
            "--out", str(tmp_path / "o"),
        ])
        assert code == 2

    def test_bundle_and_scenario_mutually_exclusive(self, scenario, tmp_path):
        code = run([
            "fit", "--bundle", str(scenario / "rep_000"),
            "--scenario", str(scenario),
            "--out", str(tmp_path / "o2"),
        ])
        assert code == 1

    def test_config_file_flags_win(self, scenario, tmp_path):
        cfg = tmp_path / "fit.cfg"
        cfg.write_text("max_iter=7\ntol=1e-3\n")
        out = tmp_path / "cfgfit"
        code = run([
            "fit", "--bundle", str(scenario / "rep_000"), "--backend", "vb",
            "--out", str(out), "--config", str(cfg), "--max-iter", "5",
        ])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["max_iter"] == 5
        assert manifest["config"]["tol"] == pytest.approx(1e-3)


class TestReportCommand:
    def test_full_report(self, scenario, fits, tmp_path):
        hmc_out, vb_out = fits
        out = tmp_path / "report"
        code = run([
            "report", "--truth", str(scenario),
            "--fit", f"hmc={hmc_out}", "--fit", f"vb={vb_out}",
            "--out", str(out), "--compare", "vb,hmc",
            "--ppm", "--contrast", "fame", "--gamma-e", "top10pct",
            "--gamma-p", "0.9",
        ])
        assert code == 0
        for name in (
            "stats_hmc.csv", "stats_vb.csv", "stats_hmc.json",
            "compare_vb_vs_hmc.csv", "compare_vb_vs_hmc.json",
            "ppm_hmc.csv", "ppm_hmc.pgm", "sensitivity_hmc.csv",
            "sensitivity_vb.csv", "mean_hmc_w1.pgm", "manifest.json",
        ):
            assert (out / name).exists(), name
        comp = json.loads((out / "compare_vb_vs_hmc.json").read_text())
        assert "mean_amse_ratio" in comp
        sens = (out / "sensitivity_hmc.csv").read_text().splitlines()
        assert sens[0] == "threshold,sensitivity"

    def test_mismatched_replicate_counts(self, scenario, fits, tmp_path):
        hmc_out, _ = fits
        partial = tmp_path / "partial"
        partial.mkdir()
        (partial / "rep_000").mkdir()
        src = hmc_out / "rep_000"
        for f in src.iterdir():
            if f.is_file():
                (partial / "rep_000" / f.name).write_bytes(f.read_bytes())
        code = run([
            "report", "--truth", str(scenario),
            "--fit", f"hmc={hmc_out}", "--fit", f"partial={partial}",
            "--out", str(tmp_path / "r2"),
        ])
        assert code == 2

    def test_bad_contrast_length(self, scenario, fits, tmp_path):
        hmc_out, _ = fits
        code = run([
            "report", "--truth", str(scenario), "--fit", f"hmc={hmc_out}",
            "--out", str(tmp_path / "r3"), "--ppm", "--contrast", "1,0",
        ])
        assert code == 2


class TestCheckCommand:
    def test_self_checks_pass(self, capsys):
        assert run(["check"]) == 0
        out = capsys.readouterr().out
        assert "all self-checks passed" in out


class TestExitCodes:
    def test_usage_error_unknown_flag(self):
        assert run(["fit", "--bogus"]) == 1

    def test_usage_error_no_command_args(self):
        assert run(["report"]) == 1

    def test_numerical_error_maps_to_3(self, monkeypatch, tmp_path):
        from glmar.errors import NumericalError

        def boom(args):
            raise NumericalError("synthetic failure")

        monkeypatch.setattr(cli, "cmd_check", boom)
        parser_args = ["check"]
        assert run(parser_args) == 3


class TestDeterminism:
    def test_fit_rerun_byte_identical(self, scenario, tmp_path):
        outs = []
        for name in ("f1", "f2"):
            out = tmp_path / name
            code = run([
                "fit", "--bundle", str(scenario / "rep_000"), "--backend", "hmc",
                "--out", str(out), "--iters", "30", "--burn", "20",
                "--leapfrog-steps", "4", "--seed", "5",
            ])
            assert code == 0
            outs.append(dir_bytes(out))
        assert outs[0] == outs[1]
