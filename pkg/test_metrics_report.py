#!/usr/bin/env python3
"""
Test script for learning-curve reports
"""

import os
import tempfile

import numpy as np
import numpy.testing as npt

from metrics_report import PAPER_REFERENCE, ReportError, aggregate, read_csv_columns, report, summary_table
from particle_env import parse_scenario
from run_config import ALGO_MAPPO, ALGO_TEM, RunConfig, save_config
from training_harness import METRICS_COLUMNS


def _write_run(run_dir, algo, seed, rewards, label="cn:3-3"):
    os.makedirs(run_dir, exist_ok=True)
    save_config(RunConfig(scenario=parse_scenario(label), algo=algo, seed=seed, out_dir=run_dir),
                os.path.join(run_dir, "run_config.txt"))
    with open(os.path.join(run_dir, "metrics.csv"), "w") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for i, reward in enumerate(rewards, start=1):
            values = [i, i * 100, reward, 0, 1, 2, 0.25, 1.5, 0.1, 0.01, 0.5, 1.2, 0.3]
            f.write(",".join(str(v) for v in values) + "\n")


def _expect_report_error(path, fragment):
    try:
        report(path)
    except ReportError as e:
        print(f"   Expected error: {e}")
        assert fragment in str(e), str(e)
    else:
        raise AssertionError(f"report accepted {path}")


def test_empty_directory():
    with tempfile.TemporaryDirectory() as tmp:
        _expect_report_error(tmp, "No runs found")
        _expect_report_error(os.path.join(tmp, "absent"), "No runs found")


def test_single_run():
    with tempfile.TemporaryDirectory() as tmp:
        _write_run(tmp, ALGO_TEM, 0, [-30.0, -25.0, -20.0])
        result = report(tmp)
        assert result.groups == {"TEM cn:3-3": 1}
        assert len(result.figures) == 2
        for path in result.figures:
            with open(path, encoding="utf-8") as f:
                assert "<svg" in f.read()
        with open(os.path.join(tmp, "summary.txt"), encoding="utf-8") as f:
            assert f.read() == result.table
    assert "-20.00" in result.table and "0.250" in result.table


def test_seeds_are_grouped():
    with tempfile.TemporaryDirectory() as tmp:
        for seed, final in enumerate([-10.0, -20.0, -30.0]):
            _write_run(os.path.join(tmp, f"tem_seed{seed}"), ALGO_TEM, seed, [-40.0, final])
        _write_run(os.path.join(tmp, "mappo"), ALGO_MAPPO, 0, [-40.0, -35.0, -30.0])
        result = report(tmp)
    assert result.groups == {"TEM cn:3-3": 3, "MAPPO cn:3-3": 1}
    # mean and spread of the three final rewards
    assert "-20.00 ± 8.16" in result.table


def test_corrupt_file_is_named():
    with tempfile.TemporaryDirectory() as tmp:
        run_dir = os.path.join(tmp, "broken")
        _write_run(run_dir, ALGO_TEM, 0, [-1.0])
        with open(os.path.join(run_dir, "metrics.csv"), "a") as f:
            f.write("2,200,not-a-number,0,0,0,0,0,0,0,0,0,0\n")
        _expect_report_error(tmp, os.path.join(run_dir, "metrics.csv"))

        with open(os.path.join(run_dir, "metrics.csv"), "w") as f:
            f.write("iteration,reward\n1,2\n")
        _expect_report_error(tmp, "missing columns")

    try:
        read_csv_columns("/nonexistent/metrics.csv")
    except ReportError as e:
        assert "Missing metrics file" in str(e)
    else:
        raise AssertionError("missing file accepted")


def test_aggregate_truncates_to_shortest():
    mean, low, high = aggregate([np.array([1.0, 2.0, 3.0]), np.array([3.0, 4.0])])
    npt.assert_array_equal(mean, [2.0, 3.0])
    npt.assert_array_equal(low, [1.0, 2.0])
    npt.assert_array_equal(high, [3.0, 4.0])


def test_summary_table_with_reference():
    rows = [{"name": "TEM", "scenario": "pp:7-3", "R": -50.0, "R_std": 2.0, "S": 10.0, "C": None,
             "R_total": -500.0, "S_total": 100.0, "C_total": 3.0, "comm_rate": 0.125}]
    table = summary_table(rows, reference=PAPER_REFERENCE)
    lines = table.splitlines()
    assert lines[0].split() == ["name", "scenario", "R", "S", "C", "R_total", "S_total", "C_total", "comm_rate"]
    assert "-50.00 ± 2.00" in lines[2] and "10.00" in lines[2] and "0.125" in lines[2]
    assert lines[2].split()[-4:] == ["-500.00", "100.00", "3.00", "0.125"]
    assert "-40.50 ± 4.70" in table and "61.60 ± 18.30" in table and "not a threshold" in table
    # the reference carries no totals
    assert lines[-1].split()[-4:] == ["-", "-", "-", "-"]


if __name__ == "__main__":
    print("=" * 60)
    print("Metrics Report Test")
    print("=" * 60)
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    for index, (name, fn) in enumerate(tests, start=1):
        print(f"\n{index}. {name}...")
        fn()
        print("   OK")
    print("\n" + "=" * 60)
    print("Metrics Report Test Complete")
    print("=" * 60)
