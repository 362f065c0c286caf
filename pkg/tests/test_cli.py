import json

import numpy as np
import pytest

from mdamerge import chkpt, toybench
from mdamerge.cli import main


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    assert main(["gen", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_gen_layout(bench_dir, capsys):
    names = sorted(p.name for p in bench_dir.iterdir())
    assert "tasks.json" in names and "pretrained.mdat" in names
    assert sum(n.startswith("task") and n.endswith(".mdat") for n in names) == 4
    manifest = json.loads((bench_dir / "tasks.json").read_text())
    assert manifest["format"] == "mda-bench/1"


def test_ta_with_zero_lambda_is_pretrained(bench_dir, tmp_path):
    out = tmp_path / "ta0.mdat"
    assert main(["merge", "--bench", str(bench_dir), "--method", "ta", "--lambda", "0.0",
                 "--out", str(out)]) == 0
    merged, pre = chkpt.load(out), chkpt.load(bench_dir / "pretrained.mdat")
    for name in toybench.BACKBONE:
        assert merged[name].tobytes() == pre[name].tobytes()


@pytest.mark.parametrize("method", ["avg", "ta", "mda-ta"])
def test_merge_then_eval(bench_dir, tmp_path, method, capsys):
    ck = tmp_path / f"{method}.mdat"
    assert main(["merge", "--bench", str(bench_dir), "--method", method, "--out", str(ck)]) == 0
    report, table = tmp_path / "r.json", tmp_path / "r.csv"
    assert main(["eval", "--bench", str(bench_dir), "--checkpoint", str(ck), "--method", method,
                 "--out", str(report), "--csv", str(table)]) == 0
    data = json.loads(report.read_text())
    assert data["schema"] == "mda-report/1" and data["method"] == method
    assert set(data["nc"]) == {"nc1", "nc2", "nc3", "nc4"}
    assert data["config"]["hp"]["alpha"] == 0.8
    assert table.read_text().startswith("method,seed,")


def test_align_writes_rotations_and_trace(bench_dir, tmp_path, capsys):
    out, trace = tmp_path / "am.mdat", tmp_path / "trace.jsonl"
    assert main(["align", "--bench", str(bench_dir), "--epochs", "3", "--out", str(out),
                 "--trace", str(trace)]) == 0
    rot = chkpt.load(tmp_path / "am.rotations.mdat")
    rs = [rot[s.name] for s in rot.manifest if s.name.startswith("rotation/")]
    assert len(rs) == 4
    for r in rs:
        np.testing.assert_allclose(r.T @ r, np.eye(8), atol=1e-6)
    lines = trace.read_text().splitlines()
    assert len(lines) == 4 and json.loads(lines[-1])["epoch"] == 3
    capsys.readouterr()
    assert main(["inspect", "--bench", str(bench_dir), "--checkpoint", str(out),
                 "--rotations", str(tmp_path / "am.rotations.mdat")]) == 0
    diag = json.loads(capsys.readouterr().out)
    assert {"nc", "delta_etf", "bound"} <= set(diag)


def test_etf_summary(capsys):
    assert main(["etf", "--classes", "3", "--dim", "2"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["max_gram_deviation"] <= 1e-5
    assert summary["kind"] == "etf-exact"


def test_run_emits_five_reports(tmp_path, capsys):
    assert main(["run", "--seeds", "0", "--epochs", "2", "--out", str(tmp_path)]) == 0
    reports = sorted(p.name for p in tmp_path.glob("report_seed0_*.json"))
    assert len(reports) == 5
    assert (tmp_path / "accuracy.csv").read_text().count("\n") == 6


def test_error_exit_codes(tmp_path, capsys):
    assert main(["merge", "--bench", str(tmp_path / "nope"), "--method", "ta",
                 "--out", str(tmp_path / "x.mdat")]) == 2
    assert main(["etf", "--classes", "1", "--dim", "3"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["merge", "--unknown-flag"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "unrecognized arguments" in err or "required" in err


def test_corrupt_checkpoint_is_validation_error(bench_dir, tmp_path, capsys):
    bad = tmp_path / "bad.mdat"
    bad.write_bytes(b"garbage!" + bytes(16))
    assert main(["eval", "--bench", str(bench_dir), "--checkpoint", str(bad)]) == 2
    assert "checkpoint format" in capsys.readouterr().err
