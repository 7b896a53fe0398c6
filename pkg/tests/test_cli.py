import json

import numpy as np
import pytest

from pofield import io as pio
from pofield.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def write_identity_model(path, n=5):
    path.write_text(json.dumps({"schema_version": 1, "factors": [{"operator": {"kind": "identity", "n": n}}]}))
    return path


def write_sr_config(path, **kw):
    cfg = {"schema_version": 1, "hi_shape": [16, 16], "factor": 2, "n_frames": 4, "n_iter": 30, "burn_in": 6}
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


def test_invalid_suite_is_usage_error(tmp_path, capsys):
    assert run("validate", "nope", "--out", tmp_path) == 2
    assert "invalid choice" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error():
    assert main([]) == 2


def test_bad_seed_is_usage_error(tmp_path):
    assert run("validate", "rng", "--seed", "-3", "--out", tmp_path) == 2


def test_validate_linop(tmp_path):
    assert run("validate", "linop", "--seed", 1, "--out", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] and report["suite"] == "linop"
    assert all({"name", "statistic", "bound", "passed"} <= set(c) for c in report["checks"])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["command"] == "validate"


def test_validate_po(tmp_path):
    assert run("validate", "po", "--seed", 7, "--out", tmp_path) == 0


def test_validate_failure_exit_code(tmp_path, monkeypatch):
    from pofield import cli
    from pofield.validate import Check

    monkeypatch.setattr(cli, "run_suite", lambda name, seed: [Check("x", 2.0, 1.0, False)])
    assert run("validate", "rng", "--out", tmp_path) == 1


def test_sample_identity(tmp_path):
    cfg = write_identity_model(tmp_path / "m.json")
    out = tmp_path / "o"
    assert run("sample", "--config", cfg, "--n-samples", 3, "--seed", 4, "--out", out) == 0
    samples = pio.read_csv(out / "samples.csv")
    assert samples.shape == (3, 5)
    lines = (out / "solve_reports.csv").read_text().splitlines()
    assert lines[0] == "sample,iterations,final_residual_norm,converged"
    assert [line.split(",")[1] for line in lines[1:]] == ["1", "1", "1"]


def test_sample_byte_identical(tmp_path):
    cfg = write_identity_model(tmp_path / "m.json", n=7)
    run("sample", "--config", cfg, "--n-samples", 4, "--seed", 9, "--out", tmp_path / "a")
    run("sample", "--config", cfg, "--n-samples", 4, "--seed", 9, "--out", tmp_path / "b")
    assert (tmp_path / "a/samples.csv").read_bytes() == (tmp_path / "b/samples.csv").read_bytes()
    run("sample", "--config", cfg, "--n-samples", 4, "--seed", 10, "--out", tmp_path / "c")
    assert (tmp_path / "a/samples.csv").read_bytes() != (tmp_path / "c/samples.csv").read_bytes()


def test_sample_posterior_model_from_files(tmp_path):
    rng = np.random.default_rng(0)
    H = rng.standard_normal((12, 6))
    pio.write_csv(tmp_path / "H.csv", H)
    pio.write_csv(tmp_path / "y.csv", rng.standard_normal(12))
    cfg = {
        "schema_version": 1,
        "factors": [
            {"operator": {"kind": "dense", "matrix": "H.csv"}, "r_diag": 0.1, "mean": "y.csv"},
            {"operator": {"kind": "identity", "n": 6}, "r_diag": 4.0},
        ],
    }
    (tmp_path / "post.json").write_text(json.dumps(cfg))
    assert run("sample", "--config", tmp_path / "post.json", "--n-samples", 5, "--out", tmp_path / "o") == 0
    rows = (tmp_path / "o/solve_reports.csv").read_text().splitlines()[1:]
    assert len(rows) == 5
    assert all(1 <= int(r.split(",")[1]) <= 6 and r.endswith(",1") for r in rows)


def test_sample_bad_config(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"schema_version": 1, "factors": [{"operator": {"kind": "?"}}]}))
    assert run("sample", "--config", tmp_path / "bad.json", "--out", tmp_path / "o") == 2
    assert run("sample", "--config", tmp_path / "missing.json", "--out", tmp_path / "o") == 2


def test_sr_sim_noiseless(tmp_path):
    cfg = write_sr_config(tmp_path / "sr.json")
    out = tmp_path / "data"
    assert run("sr-sim", "--config", cfg, "--noiseless", "--seed", 1, "--out", out) == 0
    meta = json.loads((out / "data.json").read_text())
    assert len(meta["frames"]) == 4
    frame = pio.read_image(out / "frame_00.csv")
    assert frame.shape == (8, 8)
    from pofield import sr

    c = sr.SRConfig.from_dict(meta["config"])
    truth = pio.read_image(out / "truth.csv").values
    np.testing.assert_array_equal(frame.values, sr.build_forward(c).apply(truth)[:64])
    assert (out / "frame_03.pgm").exists() and (out / "truth.pgm.json").exists()


def test_sr_sim_256_grid_five_frames(tmp_path):
    cfg = write_sr_config(tmp_path / "sr.json", hi_shape=[256, 256], n_frames=5)
    truth = tmp_path / "truth.csv"
    pio.write_csv(truth, np.zeros((256, 256)))
    assert run("sr-sim", "--config", cfg, "--truth", truth, "--out", tmp_path / "d") == 0
    frames = sorted((tmp_path / "d").glob("frame_*.csv"))
    assert len(frames) == 5
    assert pio.read_image(frames[0]).shape == (128, 128)


def test_sr_sim_dimension_mismatch(tmp_path):
    cfg = write_sr_config(tmp_path / "sr.json")
    pio.write_csv(tmp_path / "t.csv", np.zeros((8, 8)))
    assert run("sr-sim", "--config", cfg, "--truth", tmp_path / "t.csv", "--out", tmp_path / "d") == 2


def test_sr_sim_seed_reproducible(tmp_path):
    cfg = write_sr_config(tmp_path / "sr.json")
    for name in "ab":
        run("sr-sim", "--config", cfg, "--seed", 3, "--out", tmp_path / name)
    assert (tmp_path / "a/frame_02.csv").read_bytes() == (tmp_path / "b/frame_02.csv").read_bytes()


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = write_sr_config(d / "sr.json")
    assert run("sr-sim", "--config", cfg, "--gamma-n", 10, "--seed", 2, "--out", d / "data") == 0
    return d


def test_sr_run_artifacts(sim_dir, tmp_path):
    out = tmp_path / "run"
    assert run("sr-run", "--data", sim_dir / "data", "--seed", 5, "--out", out) == 0
    for name in [
        "chain.csv",
        "posterior_mean.csv",
        "posterior_mean.pgm",
        "posterior_std.csv",
        "posterior_std.pgm",
        "hist_gamma_n.csv",
        "hist_gamma_x.csv",
        "report.json",
        "manifest.json",
    ]:
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    for key in ["gamma_n_mean", "gamma_x_mean", "fraction_in_ci", "cg_iterations_total", "seed", "config_hash"]:
        assert key in report
    assert report["seed"] == 5 and not report["aborted"]
    chain = (out / "chain.csv").read_text().splitlines()
    assert chain[0] == "chain,iter,gamma_n,gamma_x,cg_iterations"
    assert len(chain) == 31


def test_sr_run_overrides_and_chains(sim_dir, tmp_path):
    out = tmp_path / "run"
    args = ["sr-run", "--data", sim_dir / "data", "--out", out, "--iters", 10, "--burn-in", 2, "--tol", 1e-4]
    assert run(*args, "--chains", 2) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["n_chains"] == 2 and report["n_iter"] == 10 and report["burn_in"] == 2
    assert report["n_posterior_samples"] == 16
    assert len((out / "chain.csv").read_text().splitlines()) == 21


def test_sr_run_abort_keeps_partial_chain(sim_dir, tmp_path, monkeypatch):
    from pofield import sr
    from pofield.errors import SolverError

    real = sr.po_sample
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] > 12:
            raise SolverError("forced", iterations=0)
        return real(*a, **kw)

    monkeypatch.setattr(sr, "po_sample", flaky)
    out = tmp_path / "run"
    assert run("sr-run", "--data", sim_dir / "data", "--out", out, "--burn-in", 2) == 1
    report = json.loads((out / "report.json").read_text())
    assert report["aborted"]
    assert len((out / "chain.csv").read_text().splitlines()) == 13
    assert (out / "posterior_mean.csv").exists()


def test_sr_run_missing_data(tmp_path):
    assert run("sr-run", "--data", tmp_path / "nothing", "--out", tmp_path / "o") == 2


def test_rerun_from_manifest_byte_identical(sim_dir, tmp_path):
    out = tmp_path / "first"
    assert run("sr-run", "--data", sim_dir / "data", "--seed", 8, "--iters", 8, "--out", out) == 0
    again = tmp_path / "again"
    assert run("rerun", out / "manifest.json", "--out", again) == 0
    for f in out.glob("*.csv"):
        assert (again / f.name).read_bytes() == f.read_bytes(), f.name
    manifest = json.loads((again / "manifest.json").read_text())
    assert manifest["out_dir"] == str(again.resolve())
