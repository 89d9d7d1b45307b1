import json
import os

import pytest

from agis.cli import EXIT_NOT_CONVERGED, EXIT_OK, EXIT_STORAGE, EXIT_VALIDATION, main
from agis.formats import RunLayout, read_json, read_jsonl
from agis.pipeline import solve

# two-year law, 120 sources: converges in a few seconds
SMALL = {"n_sources": 120, "seed": 2, "scan_law": {"mission_end": 730.5},
         "solver": {"attitude_knot_spacing": 2.0, "batch_size": 40, "max_outer": 200,
                    "primary_fraction": 0.8}}

OUTPUTS = ("truth.csv", "start.csv", "observations.bin", "manifest.json")


def write_config(path, **over):
    cfg = json.loads(json.dumps(SMALL))
    for k, v in over.items():
        if isinstance(v, dict):
            cfg.setdefault(k, {}).update(v)
        else:
            cfg[k] = v
    path.write_text(json.dumps(cfg))
    return str(path)


def simulated(tmp_path, name="run", **over):
    run = str(tmp_path / name)
    assert main(["simulate", "--run-dir", run, "--config",
                 write_config(tmp_path / f"{name}.json", **over)]) == EXIT_OK
    return run


def final_bytes(run):
    layout = RunLayout(run)
    with open(layout.final_catalog, "rb") as fh:
        cat = fh.read()
    with open(layout.final_state, "rb") as fh:
        return cat, fh.read()


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    run = simulated(tmp)
    assert main(["solve", "--run-dir", run]) == EXIT_OK
    return run


# -- simulate ----------------------------------------------------------------------


def test_simulate_default_scan_law(tmp_path, capsys):
    run = str(tmp_path / "run")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_sources": 1000}))
    assert main(["simulate", "--run-dir", run, "--config", str(cfg)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert 60 <= out["mean_obs_per_source"] <= 100
    manifest = read_json(RunLayout(run).manifest)
    assert manifest["config"]["scan_law"]["mission_end"] == pytest.approx(5 * 365.25)
    assert set(manifest["formats"]) >= {"observations", "envelope", "state", "catalog_columns"}


def test_simulate_is_reproducible(tmp_path):
    a = simulated(tmp_path, "a")
    b = simulated(tmp_path, "b")
    for name in OUTPUTS:
        with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read(), name
    with open(RunLayout(a).state(0), "rb") as fa, open(RunLayout(b).state(0), "rb") as fb:
        assert fa.read() == fb.read()


def test_seed_flag_overrides_config(tmp_path):
    a = simulated(tmp_path, "a")
    b = str(tmp_path / "b")
    assert main(["simulate", "--run-dir", b, "--config", str(tmp_path / "a.json"),
                 "--seed", "77"]) == EXIT_OK
    assert read_json(RunLayout(b).manifest)["seeds"]["catalog"] == 77
    with open(os.path.join(a, "truth.csv")) as fa, open(os.path.join(b, "truth.csv")) as fb:
        assert fa.read() != fb.read()


def test_zero_sources_is_a_validation_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_sources": 0}))
    assert main(["simulate", "--run-dir", str(tmp_path / "r"), "--config", str(cfg)]) == EXIT_VALIDATION
    assert "n_sources" in capsys.readouterr().err


def test_unknown_config_key_is_a_validation_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_source": 10}))
    assert main(["simulate", "--run-dir", str(tmp_path / "r"), "--config", str(cfg)]) == EXIT_VALIDATION


# -- solve ---------------------------------------------------------------------------


def test_zero_noise_solve_converges(solved):
    summary = read_json(RunLayout(solved).summary)
    assert summary["converged"]
    assert summary["final_rms"] < 1e-10
    assert summary["n_secondary"] == 24 and summary["secondary_failures"] == []


def test_worker_count_does_not_change_the_result(solved, tmp_path):
    ref = final_bytes(solved)
    for n in (1, 4):
        run = simulated(tmp_path, f"w{n}")
        assert main(["solve", "--run-dir", run, "--workers", str(n)]) == EXIT_OK
        assert final_bytes(run) == ref, n


def test_resumed_solve_matches_clean_run(solved, tmp_path):
    run = simulated(tmp_path)
    out = solve(run, stop_after=7)
    assert out["reason"] == "interrupted"
    assert len(read_jsonl(RunLayout(run).report)) == 7
    assert main(["solve", "--run-dir", run]) == EXIT_OK
    assert final_bytes(run) == final_bytes(solved)


def test_not_converged_exit_keeps_outputs(tmp_path):
    run = simulated(tmp_path, solver={"max_outer": 2})
    assert main(["solve", "--run-dir", run]) == EXIT_NOT_CONVERGED
    assert os.path.exists(RunLayout(run).final_catalog)
    assert read_json(RunLayout(run).summary)["reason"] == "max_outer reached"


def test_solve_without_simulation(tmp_path):
    assert main(["solve", "--run-dir", str(tmp_path / "none")]) == EXIT_STORAGE


# -- report and status -----------------------------------------------------------------


def test_zero_noise_report(solved, capsys):
    assert main(["report", "--run-dir", solved]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    rows = [json.loads(line)["throughput"] for line in lines if line.startswith('{"throughput"')]
    summary = read_json(RunLayout(solved).summary)
    assert len(rows) == summary["iterations"]
    assert all(r["obs_per_worker_hour"] > 0 for r in rows)
    out = read_json(os.path.join(solved, "report.json"))
    for name in ("alpha_star", "delta", "parallax", "pm_alpha_star", "pm_delta"):
        assert out["errors_all"][name]["rms_rad"] < 1e-9, name
    assert len(out["chi2_history"]) == summary["iterations"]


def test_report_is_idempotent(solved):
    main(["report", "--run-dir", solved])
    first = open(os.path.join(solved, "report.json")).read()
    main(["report", "--run-dir", solved])
    assert open(os.path.join(solved, "report.json")).read() == first


def test_noisy_report_matches_formal_errors(tmp_path):
    run = simulated(tmp_path, sigma_al_mas=1.0)
    assert main(["solve", "--run-dir", run]) == EXIT_OK
    main(["report", "--run-dir", run])
    plx = read_json(os.path.join(run, "report.json"))["errors_all"]["parallax"]
    assert 0.5 <= plx["rms_rad"] / plx["median_formal_rad"] <= 2.0


def test_report_needs_a_finished_run(tmp_path):
    run = simulated(tmp_path)
    assert main(["report", "--run-dir", run]) == EXIT_STORAGE


def test_status(solved, tmp_path, capsys):
    run = simulated(tmp_path)
    capsys.readouterr()
    assert main(["status", "--run-dir", run]) == EXIT_OK
    before = json.loads(capsys.readouterr().out)
    assert before["iterations"] == 0 and not before["solved"]
    assert main(["status", "--run-dir", solved]) == EXIT_OK
    after = json.loads(capsys.readouterr().out)
    assert after["solved"] and after["converged"] and after["jobs"]["PENDING"] == 0


# -- worker --------------------------------------------------------------------------------


def test_worker_without_jobs_exits_cleanly(tmp_path, capsys):
    run = simulated(tmp_path)
    os.makedirs(RunLayout(run).store)
    capsys.readouterr()
    assert main(["worker", "--run-dir", run]) == EXIT_OK
    last = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert last["summary"]["jobs"] == 0 and last["summary"]["n_obs"] == 0


def test_worker_with_missing_store_fails(tmp_path):
    assert main(["worker", "--run-dir", str(tmp_path / "absent")]) == EXIT_STORAGE


def test_worker_writes_stats_file(solved):
    layout = RunLayout(solved)
    rows = read_jsonl(layout.worker_stats("local"))
    jobs = [r for r in rows if "job_id" in r]
    assert jobs and all(r["n_obs"] > 0 and r["seconds"] > 0 for r in jobs)
    assert any("summary" in r for r in rows)
