import csv
import json
from pathlib import Path

import pytest

from seqpar.cli import main
from seqpar.harness import COMMANDS, load_schema

ROOT = Path(__file__).resolve().parents[1]


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_verify_small_config(small_config, tmp_path):
    out = tmp_path / "out"
    assert main(["verify", "--config", small_config(), "--out", str(out)]) == 0
    rows = [r for p in sorted(out.glob("verify_*.csv")) for r in _rows(p)]
    assert len(rows) >= 40
    assert all(r["passed"] == "pass" for r in rows)
    assert any(r["engine"] == "ulysses" and r["sp"] == "4" and "divisibility error expected" in r["metric"]
               for r in rows)


def test_verify_default_config_exit_zero(tmp_path):
    out = tmp_path / "out"
    assert main(["verify", "--out", str(out)]) == 0
    rows = [r for p in out.glob("verify_*.csv") for r in _rows(p)]
    assert len(rows) >= 40


def test_csv_names_and_columns(small_config, tmp_path):
    out = tmp_path / "out"
    cfg = small_config()
    assert main(["comm-report", "--config", cfg, "--out", str(out), "--engines", "ulysses,ring_zigzag"]) == 0
    assert (out / "comm-report_ulysses_sp2.csv").exists()
    assert (out / "comm-report_ring_zigzag_sp4.csv").exists()
    stats = (out / "comm-report_ulysses_sp2_stats.csv").read_text().splitlines()
    assert stats[0] == "engine,rank,primitive,calls,bytes"
    assert main(["train", "--config", cfg, "--out", str(out), "--engines", "ulysses", "--sp", "2"]) == 0
    curve = (out / "train_ulysses_sp2.csv").read_text().splitlines()
    assert curve[0] == "step,loss,grad_norm"
    assert len(curve) == 1 + 2 * 2
    assert (out / "train_oracle_sp1.csv").exists()


def test_exit_one_when_everything_is_infeasible(small_config, tmp_path):
    code = main(["train", "--config", small_config(), "--out", str(tmp_path / "o"), "--engines", "ulysses",
                 "--sp", "4"])
    assert code == 1


@pytest.mark.parametrize("args", [
    ["verify", "--engines", "flash"],
    ["verify", "--sp", "0"],
    ["verify", "--layout", "striped"],
    ["frobnicate"],
    ["verify", "--scheduler", "mpi"],
])
def test_bad_arguments_exit_two(args, tmp_path):
    assert main(args + ["--out", str(tmp_path / "o")]) == 2


def test_bad_config_exit_two(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["verify", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert main(["verify", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"model": {"hidden": 40}}))
    assert main(["verify", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"trainer": {"epochs": 0}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["verify", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2


def test_unwritable_output_exit_two(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["balance-report", "--out", str(blocker / "sub")]) == 2
    assert main(["balance-report", "--out", str(blocker)]) == 2


def test_schema_copy_in_docs_matches_package():
    shipped = json.loads((ROOT / "docs" / "config_schema.json").read_text())
    assert shipped == load_schema()


def _snapshot(out: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.suffix in (".csv", ".svg")}


@pytest.mark.parametrize("command", COMMANDS)
def test_outputs_identical_across_schedulers_and_reruns(command, small_config, tmp_path):
    cfg = small_config()
    extra = ["--engines", "ulysses,ring_zigzag", "--sp", "2"] if command == "train" else []
    snaps = []
    for i, sched in enumerate(["lockstep", "threads", "lockstep"]):
        out = tmp_path / f"run{i}"
        assert main([command, "--config", cfg, "--out", str(out), "--seed", "3", "--scheduler", sched]
                    + extra) == 0
        snaps.append(_snapshot(out))
    assert snaps[0] and snaps[0] == snaps[1] == snaps[2]
