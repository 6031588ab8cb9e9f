"""Command-line interface: artifacts, exit codes, config files, verify suites."""

import csv
import dataclasses
import json

from branchmpc import cli, dynamics


def run_cli(argv):
    try:
        return cli.main([str(a) for a in argv])
    except SystemExit as exc:  # argparse rejections also exit with status 2
        return exc.code


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def test_run_writes_log_and_metrics(tmp_path, capsys):
    code = run_cli(["run", "--scenario", "merge", "--duration", "0.4",
                    "--seed", "1", "--out", tmp_path])
    assert code == 0
    rows = read_jsonl(tmp_path / "run.jsonl")
    assert len(rows) == 3  # two control steps + terminal record
    assert rows[0]["tree"] is not None and rows[-1]["tree"] is None
    with open(tmp_path / "metrics.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 1
    assert table[0]["scenario"] == "merge"
    assert "min_normalized_distance" in capsys.readouterr().out


def test_run_no_trees_drops_tree_payload(tmp_path):
    code = run_cli(["run", "--scenario", "merge", "--duration", "0.4",
                    "--no-trees", "--out", tmp_path])
    assert code == 0
    assert all("tree" not in row for row in read_jsonl(tmp_path / "run.jsonl"))


def test_run_robust_mode(tmp_path):
    code = run_cli(["run", "--scenario", "merge", "--duration", "0.4",
                    "--mode", "robust", "--out", tmp_path])
    assert code == 0
    table = list(csv.DictReader(open(tmp_path / "metrics.csv", newline="")))
    assert table[0]["mode"] == "robust"


def test_run_rejects_bad_alpha(tmp_path, capsys):
    code = run_cli(["run", "--scenario", "merge", "--alpha", "1.5",
                    "--out", tmp_path])
    assert code == 2
    assert "alpha" in capsys.readouterr().err


def test_run_rejects_unknown_scenario(tmp_path, capsys):
    code = run_cli(["run", "--scenario", "parallel-park", "--out", tmp_path])
    assert code == 2
    assert "parallel-park" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def test_sweep_one_row_per_alpha(tmp_path):
    code = run_cli(["sweep", "--scenario", "merge", "--duration", "0.4",
                    "--alphas", "0.3,0.9", "--out", tmp_path])
    assert code == 0
    table = list(csv.DictReader(open(tmp_path / "metrics.csv", newline="")))
    assert [row["alpha"] for row in table] == ["0.3", "0.9"]
    assert (tmp_path / "run-a0.3.jsonl").exists()
    assert (tmp_path / "run-a0.9.jsonl").exists()


def test_sweep_rejects_malformed_alphas(tmp_path, capsys):
    code = run_cli(["sweep", "--scenario", "merge", "--alphas", "0.3,zebra",
                    "--out", tmp_path])
    assert code == 2
    assert "zebra" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "scenario.yaml"
    cfg.write_text(
        "scenario: merge\n"
        "alpha: 0.5\n"
        "duration: 0.4\n"
        "overrides:\n"
        "  planner:\n"
        "    sqp_iterations: 1\n"
    )
    code = run_cli(["run", "--config", cfg, "--out", tmp_path])
    assert code == 0
    rows = read_jsonl(tmp_path / "run.jsonl")
    assert all(len(r["diagnostics"]) == 1 for r in rows[:-1])
    table = list(csv.DictReader(open(tmp_path / "metrics.csv", newline="")))
    assert table[0]["alpha"] == "0.5"


def test_cli_flags_win_over_config_file(tmp_path):
    cfg = tmp_path / "scenario.yaml"
    cfg.write_text("scenario: merge\nalpha: 0.5\nduration: 0.4\n")
    code = run_cli(["run", "--config", cfg, "--alpha", "0.7", "--out", tmp_path])
    assert code == 0
    table = list(csv.DictReader(open(tmp_path / "metrics.csv", newline="")))
    assert table[0]["alpha"] == "0.7"


def test_config_file_unknown_key_is_line_precise_error(tmp_path, capsys):
    cfg = tmp_path / "scenario.yaml"
    cfg.write_text("scenario: merge\noverrides:\n  planner:\n    warp: 9\n")
    code = run_cli(["run", "--config", cfg, "--out", tmp_path])
    assert code == 2
    err = capsys.readouterr().err
    assert "warp" in err and "planner" in err


def test_config_file_type_error(tmp_path, capsys):
    cfg = tmp_path / "scenario.yaml"
    cfg.write_text("scenario: merge\nseed: banana\n")
    code = run_cli(["run", "--config", cfg, "--out", tmp_path])
    assert code == 2
    assert "seed" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def test_verify_all_suites_pass(capsys):
    assert run_cli(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    for name in ("cvar-dual", "nested-risk-vs-conic", "dynamics-jacobians",
                 "probability-jacobians", "weight-gradients", "topology"):
        assert name in out


def test_verify_catches_an_injected_jacobian_bug(monkeypatch, capsys):
    """Negative control: a corrupted linearization must turn the table red."""
    true_linearize = dynamics.linearize

    def crooked(state, inp, dt, model):
        affine = true_linearize(state, inp, dt, model)
        A = affine.A.copy()
        A[0, -1] += 0.05
        return dataclasses.replace(affine, A=A)

    monkeypatch.setattr(dynamics, "linearize", crooked)
    assert run_cli(["verify"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out
    for line in out.splitlines():
        if "dynamics-jacobians" in line:
            assert "FAIL" in line
