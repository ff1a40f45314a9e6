import csv
import json

import numpy as np
import pytest

from sloppy_reduce.bench import fixture_dir
from sloppy_reduce.cli import main
from sloppy_reduce.sloppiness import SloppySpectrum, leading_cosines


def run(args, capsys=None):
    code = main([str(a) for a in args])
    if capsys is not None:
        capsys.readouterr()
    return code


def runs_in(root):
    return sorted(p.name for p in root.iterdir() if p.is_dir()) if root.exists() else []


@pytest.fixture(scope="module")
def smc_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["calibrate", "--model", "linear-log", "--particles", "300", "--seed", "3",
                 "--out", str(root), "--run-id", "smc"]) == 0
    assert main(["sloppy", "--run", str(root / "smc"), "--run-id", "pc"]) == 0
    return root


@pytest.fixture(scope="module")
def exp_mle_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-mle")
    assert main(["calibrate", "--model", "exp-sum", "--method", "mle", "--starts", "100",
                 "--out", str(root), "--run-id", "mle"]) == 0
    return root


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_calibrate_mle_artifacts(exp_mle_run):
    run_path = exp_mle_run / "mle"
    entries = json.loads((run_path / "mle.json").read_text())
    assert len(entries) == 100
    flags = [e["retained"] for e in entries]
    assert sum(flags) == 5
    assert flags == sorted(flags, reverse=True)
    manifest = json.loads((run_path / "manifest.json").read_text())
    assert set(manifest["artifacts"]) == {"mle.json", "model.json"}
    assert manifest["max_loglik"] == entries[0]["loglik"]


def test_calibrate_smc_artifacts(smc_run):
    run_path = smc_run / "smc"
    rows = read_csv(run_path / "particles.csv")
    assert len(rows) == 301
    assert rows[0][:4] == ["theta1", "theta2", "theta3", "sigma"]
    meta = json.loads((run_path / "particles.json").read_text())
    manifest = json.loads((run_path / "manifest.json").read_text())
    assert meta["log_evidence"] == manifest["log_evidence"]
    assert manifest["data_sha256"] == meta["data_hash"]


def test_missing_data_leaves_nothing(tmp_path, capsys):
    code = run(["calibrate", "--model", "linear-log", "--data", tmp_path / "absent.csv",
                "--out", tmp_path / "runs"], capsys)
    assert code == 2
    assert runs_in(tmp_path / "runs") == []


def test_failed_stage_leaves_no_partial_run(tmp_path, capsys):
    code = run(["calibrate", "--model", "linear-log", "--particles", "50", "--out", tmp_path], capsys)
    assert code == 2
    assert list(tmp_path.iterdir()) == []


def test_custom_config_requires_data(tmp_path, capsys):
    cfg = tmp_path / "m.json"
    cfg.write_text((fixture_dir("linear-log") / "config.json").read_text())
    assert run(["calibrate", "--model", cfg, "--out", tmp_path / "r"], capsys) == 2


def test_sloppy_matrix_must_match_method(smc_run, capsys):
    assert run(["sloppy", "--run", smc_run / "smc", "--matrix", "hessian"], capsys) == 2


def test_sloppy_postcov_outputs(smc_run):
    path = smc_run / "pc"
    spectrum = read_csv(path / "spectrum.csv")
    assert len(spectrum) == 4
    vecs = read_csv(path / "eigenvectors.csv")
    assert [r[0] for r in vecs[1:]] == ["theta1", "theta2", "theta3"]
    assert "=" in (path / "eigenparams.txt").read_text()


def test_sloppy_delta_stability(exp_mle_run, capsys):
    root = exp_mle_run
    assert run(["sloppy", "--run", root / "mle", "--matrix", "hessian", "--run-id", "d1"], capsys) == 0
    assert run(["sloppy", "--run", root / "mle", "--matrix", "hessian", "--delta", "0.02",
                "--run-id", "d2"], capsys) == 0
    a = np.linalg.eigvalsh(json.loads((root / "d1" / "matrix.json").read_text())["entries"])
    b = np.linalg.eigvalsh(json.loads((root / "d2" / "matrix.json").read_text())["entries"])
    assert np.allclose(a, b, rtol=0.01)


def test_toy_hessian_has_nine_eigenvectors(tmp_path, capsys):
    assert run(["calibrate", "--model", "toy-polyp", "--method", "mle", "--starts", "2",
                "--out", tmp_path, "--run-id", "mle"], capsys) == 0
    assert run(["sloppy", "--run", tmp_path / "mle", "--matrix", "hessian", "--run-id", "h"], capsys) == 0
    vecs = read_csv(tmp_path / "h" / "eigenvectors.csv")
    assert len(vecs) == 10 and len(vecs[0]) == 10


def test_reduce_force_drop(smc_run, capsys):
    assert run(["reduce", "--run", smc_run / "smc", "--max-drop", "1", "--force-drop", "theta3",
                "--starts", "2", "--run-id", "red"], capsys) == 0
    report = read_csv(smc_run / "red" / "report.csv")
    assert [r[0] for r in report[1:]] == ["original", "theta3"]
    assert float(report[2][5]) > 100
    assert (smc_run / "red" / "theta3" / "particles.csv").exists()
    scores = read_csv(smc_run / "red" / "scores.csv")
    assert scores[0] == ["mechanism", "score", "removable", "stiff_set"]


def test_reduce_refuses_locked_mechanism(tmp_path, capsys):
    doc = json.loads((fixture_dir("linear-log") / "config.json").read_text())
    doc["mechanisms"]["_removable"] = {"theta3": False}
    cfg = tmp_path / "locked.json"
    cfg.write_text(json.dumps(doc))
    data = fixture_dir("linear-log") / "data.csv"
    root = tmp_path / "runs"
    assert run(["calibrate", "--model", cfg, "--data", data, "--particles", "200",
                "--out", root, "--run-id", "smc"], capsys) == 0
    assert run(["sloppy", "--run", root / "smc", "--run-id", "pc"], capsys) == 0
    before = runs_in(root)
    assert run(["reduce", "--run", root / "smc", "--force-drop", "theta3", "--starts", "0"], capsys) == 2
    assert runs_in(root) == before
    assert run(["reduce", "--run", root / "smc", "--force-drop", "theta3", "--i-know", "--starts", "0",
                "--run-id", "forced"], capsys) == 0
    assert "theta3" in json.loads((root / "forced" / "manifest.json").read_text())["candidates"]


def test_compare_refuses_mixed_datasets(smc_run, tmp_path, capsys):
    if not (smc_run / "red").exists():
        assert run(["reduce", "--run", smc_run / "smc", "--force-drop", "theta3", "--starts", "0",
                    "--run-id", "red"], capsys) == 0
    assert run(["compare", "--runs", smc_run / "red", smc_run / "red", "--out", tmp_path / "ok",
                "--run-id", "cmp"], capsys) == 0
    merged = read_csv(tmp_path / "ok" / "cmp" / "comparison.csv")
    assert merged[0][0] == "run" and len(merged) == 5

    rows = read_csv(fixture_dir("linear-log") / "data.csv")
    rows[1][-1] = repr(float(rows[1][-1]) + 0.01)
    other = tmp_path / "other.csv"
    with open(other, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    root = tmp_path / "other"
    assert run(["calibrate", "--model", "linear-log", "--data", other, "--particles", "200",
                "--out", root, "--run-id", "smc"], capsys) == 0
    assert run(["sloppy", "--run", root / "smc", "--run-id", "pc"], capsys) == 0
    assert run(["reduce", "--run", root / "smc", "--force-drop", "theta3", "--starts", "0",
                "--run-id", "red"], capsys) == 0
    assert run(["compare", "--runs", smc_run / "red", root / "red", "--out", tmp_path / "bad"], capsys) == 2
    assert runs_in(tmp_path / "bad") == []


def test_changed_dataset_is_detected(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_bytes((fixture_dir("linear-log") / "data.csv").read_bytes())
    root = tmp_path / "runs"
    assert run(["calibrate", "--model", "linear-log", "--data", data, "--particles", "200",
                "--out", root, "--run-id", "smc"], capsys) == 0
    data.write_text(data.read_text() + "\n")
    assert run(["sloppy", "--run", root / "smc"], capsys) == 2


def test_verify_round_trip(smc_run, tmp_path, capsys):
    assert run(["verify", "--manifest", smc_run / "smc" / "manifest.json"], capsys) == 0
    assert run(["verify", "--manifest", smc_run / "pc" / "manifest.json"], capsys) == 0
    doc = json.loads((smc_run / "smc" / "manifest.json").read_text())
    doc["artifacts"]["particles.csv"]["sha256"] = "0" * 64
    tampered = tmp_path / "manifest.json"
    tampered.write_text(json.dumps(doc))
    assert run(["verify", "--manifest", tampered], capsys) == 3


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0


@pytest.mark.slow
def test_toy_polyp_end_to_end(tmp_path, capsys):
    root = tmp_path
    assert run(["calibrate", "--model", "toy-polyp", "--particles", "5000", "--seed", "7",
                "--out", root, "--run-id", "smc"], capsys) == 0
    assert len(read_csv(root / "smc" / "particles.csv")) == 5001
    for kind in ("postcov", "lis"):
        assert run(["sloppy", "--run", root / "smc", "--matrix", kind, "--run-id", kind], capsys) == 0
    assert len(read_csv(root / "postcov" / "eigenvectors.csv")) == 10
    cos = leading_cosines(SloppySpectrum.read(root / "postcov"), SloppySpectrum.read(root / "lis"), 1)
    assert cos[0] >= 0.95
    assert run(["reduce", "--run", root / "smc", "--force-drop", "pump1", "--starts", "0",
                "--run-id", "red"], capsys) == 0
    report = {r[0]: r for r in read_csv(root / "red" / "report.csv")[1:]}
    assert set(report) == {"original", "pump2", "kco2-channel", "kco2-channel+pump2", "pump1"}
    assert float(report["pump1"][5]) > 100
