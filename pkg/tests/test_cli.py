import csv
from pathlib import Path

import pytest
import yaml

from twinloop.cli import EXIT_DIVERGED, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, main
from twinloop.scenario import TRUTH_COLUMNS


def write(tmp_path: Path, name: str, tree: dict) -> str:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(tree))
    return str(path)


def rows(path: Path) -> list[list[str]]:
    with path.open(newline="") as fh:
        return list(csv.reader(fh))


def run(*argv: str) -> int:
    return main([*argv, "--quiet"])


def test_simulate_and_verify(tmp_path):
    cfg = write(tmp_path, "c.yaml", {"scenario": {"duration": 3.0}})
    out = tmp_path / "sim"
    assert run("simulate", "--config", cfg, "--out", str(out)) == EXIT_OK
    for name in ("truth.csv", "truth.gp", "config.resolved.yaml", "manifest.json"):
        assert (out / name).is_file()
    assert len(rows(out / "truth.csv")) == 301
    assert run("report", str(out), "--verify") == EXIT_OK
    assert run("report", str(out)) == EXIT_OK


def test_tampered_output_fails_verification(tmp_path):
    cfg = write(tmp_path, "c.yaml", {"scenario": {"duration": 3.0}})
    out = tmp_path / "sim"
    assert run("simulate", "--config", cfg, "--out", str(out)) == EXIT_OK
    with (out / "truth.csv").open("a") as fh:
        fh.write("junk\n")
    assert run("report", str(out), "--verify") == EXIT_MISMATCH


def test_empty_duration_gives_header_only_csv(tmp_path):
    cfg = write(tmp_path, "c.yaml", {"scenario": {"duration": 0.0}})
    assert run("simulate", "--config", cfg, "--out", str(tmp_path)) == EXIT_OK
    assert rows(tmp_path / "truth.csv") == [list(TRUTH_COLUMNS)]


@pytest.mark.parametrize("tree", [{"scenario": {"kind": "bogus"}},
                                  {"estimation": {"target": "mass", "bogus": 1}}])
def test_config_errors_exit_2(tmp_path, tree, capsys):
    cfg = write(tmp_path, "bad.yaml", tree)
    assert run("simulate", "--config", cfg, "--out", str(tmp_path / "o")) == EXIT_USAGE
    assert "bad.yaml:" in capsys.readouterr().err


def test_silent_channel_with_snr_noise_is_usage_error(tmp_path, capsys):
    cfg = write(tmp_path, "c.yaml", {"scenario": {"duration": 1.0, "noise": {"snr": 10.0}}})
    assert run("simulate", "--config", cfg, "--out", str(tmp_path)) == EXIT_USAGE
    assert "sigma" in capsys.readouterr().err


def test_missing_gains_file_is_usage_error(tmp_path):
    assert run("estimate", "--gains", str(tmp_path / "none.yaml"), "--out", str(tmp_path)) == EXIT_USAGE


def test_bad_flag_is_usage_error():
    assert main(["simulate", "--no-such-flag"]) == EXIT_USAGE


def test_mass_table_config_gives_three_rows(tmp_path):
    cfg = write(tmp_path, "m.yaml", {"scenario": {"kind": "urban", "duration": 20.0},
                                     "estimation": {"target": "mass", "conditions": "table",
                                                    "seeds": [1]}})
    out = tmp_path / "est"
    assert run("estimate", "--config", cfg, "--out", str(out)) == EXIT_OK
    summary = rows(out / "rms_summary.csv")
    assert summary[0] == ["condition", "dm_rms_percent", "diverged"]
    assert len(summary) == 4


def test_zero_gain_estimate_is_open_loop_baseline(tmp_path):
    cfg = write(tmp_path, "m.yaml", {"scenario": {"kind": "urban", "duration": 10.0}})
    gains = write(tmp_path, "g.yaml", {"k_ax_dm": 0.0})
    out = tmp_path / "est"
    assert run("estimate", "--config", cfg, "--gains", gains, "--out", str(out)) == EXIT_OK
    table = rows(out / "rms_table.csv")
    # the estimate never leaves its zero start, so it misses the whole truth deviation
    assert float(table[1][3]) == pytest.approx(100.0, rel=1e-12)


def test_all_divergent_tuning_exits_3(tmp_path):
    cfg = write(tmp_path, "d.yaml", {"tune": {"iterations": 4, "n_seed": 4, "tuning_duration": 5.0,
                                              "validation_duration": 5.0,
                                              "bounds": {"k_ax_dm": [-1.0e6, -1.0e5]}}})
    assert run("tune", "--config", cfg, "--estimator", "til", "--out", str(tmp_path)) == EXIT_DIVERGED


def test_sweep_counts(tmp_path):
    cfg = write(tmp_path, "s.yaml", {"scenario": {"duration": 10.0},
                                     "sweep": {"axis": "snr", "values": [5.0, 10.0, 20.0],
                                               "seeds": [1, 2, 3, 4, 5]}})
    assert run("sweep", "--config", cfg, "--out", str(tmp_path / "a")) == EXIT_OK
    assert len(rows(tmp_path / "a" / "sweep.csv")) == 16
    one = write(tmp_path, "one.yaml", {"scenario": {"duration": 10.0},
                                       "sweep": {"axis": "snr", "values": [10.0], "seeds": [1]}})
    assert run("sweep", "--config", one, "--out", str(tmp_path / "b")) == EXIT_OK
    assert len(rows(tmp_path / "b" / "sweep.csv")) == 2


def test_tune_writes_gains_that_estimate_accepts(tmp_path):
    cfg = write(tmp_path, "t.yaml", {"scenario": {"duration": 5.0},
                                     "tune": {"iterations": 3, "n_seed": 3, "tuning_duration": 5.0,
                                              "validation_duration": 5.0}})
    out = tmp_path / "tune"
    assert run("tune", "--config", cfg, "--estimator", "til", "--out", str(out)) == EXIT_OK
    assert len(rows(out / "history_til.csv")) == 4
    assert run("estimate", "--config", cfg, "--gains", str(out / "gains.yaml"),
               "--out", str(tmp_path / "est")) == EXIT_OK
