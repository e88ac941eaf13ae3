"""Sweep grid expansion, fingerprints, resume semantics and reports."""

import csv
import json
import os

import numpy as np
import pytest

from prunelab.errors import ConfigError
from prunelab.sweep import (
    SUMMARY_FIELDS,
    SweepCell,
    SweepRunner,
    aggregate,
    best_per_granularity,
    fingerprint,
    grid,
    write_summary,
)


def test_fingerprint_is_order_insensitive_and_value_sensitive():
    a = fingerprint({"x": 1, "y": "z"})
    b = fingerprint({"y": "z", "x": 1})
    assert a == b and len(a) == 16
    assert fingerprint({"x": 2, "y": "z"}) != a


def test_cell_payload_merges_base_and_cell():
    cell = SweepCell("half", "mixed", "mse", 3e-5, 20, 1)
    p = cell.payload({"model": {"d_model": 128}, "pattern": "0.5"})
    assert p["model"] == {"d_model": 128}
    assert p["granularity"] == "half" and p["seed"] == 1
    assert p["lr"] == repr(3e-5)  # exact float identity in the payload


def test_grid_cartesian_product_and_validation():
    cfg = {"granularities": ["half", "matrix"], "strategies": ["mixed"],
           "losses": ["mse", "cos"], "lrs": [1e-5, 1e-4], "epochs": [5],
           "seeds": [0, 1]}
    cells = grid(cfg)
    assert len(cells) == 2 * 1 * 2 * 2 * 1 * 2
    assert len(set(cells)) == len(cells)
    with pytest.raises(ConfigError):
        grid({"granularities": ["half"], "seeds": []})
    with pytest.raises(ConfigError):
        grid({"granularities": ["half"], "lrs": ["fast"]})
    with pytest.raises(ValueError):
        grid({"granularities": ["nonsense"]})


def test_grid_of_one():
    cells = grid({"granularities": ["half"]})
    assert len(cells) == 1
    assert cells[0] == SweepCell("half", "mixed", "mse", 3e-5, 20, 0)


def fake_result(cell, rec=0.5):
    return {"ppl_dense": 10.0, "ppl_pruned": 20.0,
            "ppl_reconstructed": 20.0 - 10.0 * rec, "recovery": rec,
            "mask_violation": 0.0}


def test_runner_resume_skips_finished_cells(tmp_path):
    cells = grid({"granularities": ["half", "matrix"], "seeds": [0, 1]})
    runner = SweepRunner(str(tmp_path), {"model": "toy"})
    calls = []

    def executor(cell):
        calls.append(cell)
        return fake_result(cell)

    runner.run(cells, executor)
    assert runner.executed == 4 and runner.skipped == 0
    assert len(calls) == 4

    runner2 = SweepRunner(str(tmp_path), {"model": "toy"})
    runner2.run(cells, executor)
    assert runner2.executed == 0 and runner2.skipped == 4
    assert len(calls) == 4  # nothing recomputed


def test_runner_partial_resume(tmp_path):
    cells = grid({"granularities": ["half"], "seeds": [0, 1, 2]})
    runner = SweepRunner(str(tmp_path), {})
    runner.run(cells[:1], fake_result)
    runner2 = SweepRunner(str(tmp_path), {})
    runner2.run(cells, fake_result)
    assert runner2.skipped == 1 and runner2.executed == 2


def test_changed_base_payload_changes_fingerprints(tmp_path):
    cells = grid({"granularities": ["half"]})
    r1 = SweepRunner(str(tmp_path), {"pattern": "0.5"})
    r1.run(cells, fake_result)
    r2 = SweepRunner(str(tmp_path), {"pattern": "2:4"})
    r2.run(cells, fake_result)
    assert r2.executed == 1  # different payload, not a resume hit


def test_rows_round_trip_and_summary(tmp_path):
    cfg = {"granularities": ["half", "matrix"], "lrs": [1e-5, 1e-4],
           "seeds": [0, 1]}
    cells = grid(cfg)
    runner = SweepRunner(str(tmp_path), {})

    def executor(cell):
        rec = 0.8 if cell.granularity == "half" else 0.4
        rec += 0.05 * cell.seed + (0.02 if cell.lr > 5e-5 else 0.0)
        return fake_result(cell, rec)

    runner.run(cells, executor)
    rows = runner.load_rows()
    assert len(rows) == 8
    csv_path, md_path = write_summary(str(tmp_path), rows)

    with open(csv_path) as f:
        parsed = list(csv.DictReader(f))
    assert len(parsed) == 8
    assert list(parsed[0].keys()) == list(SUMMARY_FIELDS)
    # repr round trip keeps float identity
    for line, row in zip(parsed, rows):
        assert float(line["recovery"]) == row["recovery"]

    agg = aggregate(rows)
    assert all(a["n_seeds"] == 2 for a in agg)
    by_key = {(a["granularity"], a["lr"]): a for a in agg}
    assert np.isclose(by_key[("half", 1e-5)]["mean_recovery"],
                      (0.8 + 0.85) / 2)

    ranked = best_per_granularity(rows)
    assert [a["granularity"] for a in ranked] == ["half", "matrix"]
    assert ranked[0]["lr"] == 1e-4

    md = open(md_path).read()
    assert "Granularity ranking" in md
    assert "| 1 | half |" in md


def test_summary_deterministic_bytes(tmp_path):
    cells = grid({"granularities": ["half"], "seeds": [0, 1]})
    runner = SweepRunner(str(tmp_path), {})
    runner.run(cells, fake_result)
    rows = runner.load_rows()
    c1, m1 = write_summary(str(tmp_path), rows)
    first = (open(c1, "rb").read(), open(m1, "rb").read())
    c2, m2 = write_summary(str(tmp_path), runner.load_rows())
    assert (open(c2, "rb").read(), open(m2, "rb").read()) == first


def test_record_is_atomic_no_tmp_left_behind(tmp_path):
    cells = grid({"granularities": ["half"]})
    runner = SweepRunner(str(tmp_path), {})
    runner.run(cells, fake_result)
    names = os.listdir(os.path.join(str(tmp_path), "runs"))
    assert all(not n.endswith(".tmp") for n in names)
    with open(os.path.join(str(tmp_path), "runs", names[0])) as f:
        row = json.load(f)
    assert row["fingerprint"] == names[0][:-5]
