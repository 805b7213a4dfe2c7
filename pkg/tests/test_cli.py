import hashlib
import json
import os

import pytest

from tga.cli import EXIT_DATA, EXIT_OK, main
from tga.metrics import REPORT_KEYS

SMALL_SYNTH = {"train_scenes": 3, "eval_scenes": 2}
SMALL_MODEL = ["--dim", "8", "--layers", "1", "--heads", "2", "--hidden", "16"]


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "synth.json"
    cfg.write_text(json.dumps(SMALL_SYNTH))
    assert main(["gen", str(root / "data"), "--config", str(cfg)]) == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "ck"),
                 "--steps", "3", *SMALL_MODEL]) == EXIT_OK
    return root


def scene_ids(root):
    doc = json.loads((root / "data" / "manifest.json").read_text())
    return [s["id"] for s in doc["scenes"]]


def test_gen_is_deterministic(tmp_path, workspace):
    cfg = workspace / "synth.json"
    assert main(["gen", str(tmp_path / "a"), "--config", str(cfg)]) == EXIT_OK
    assert main(["gen", str(tmp_path / "b"), "--config", str(cfg), "--workers", "2"]) == EXIT_OK
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert main(["gen", str(tmp_path / "c"), "--config", str(cfg), "--seed", "9"]) == EXIT_OK
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_gen_to_unwritable_path(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        assert main(["gen", str(locked / "d")]) == EXIT_DATA
        assert not (locked / "d").exists()
    finally:
        locked.chmod(0o700)


def test_gen_under_a_file_fails_before_writing(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", str(blocker / "d")]) == EXIT_DATA
    assert "not a directory" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    for argv in (["frobnicate"], ["train"], ["gen", str(tmp_path), "--workers", "0"],
                 ["train", "--data", "x", "--out", "y", "--mask-loss", "l2"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_data_errors_exit_3(tmp_path, workspace, capsys):
    data, ck = str(workspace / "data"), str(workspace / "ck")
    sid = scene_ids(workspace)[0]
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    cases = [
        ["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")],
        ["train", "--data", data, "--out", str(tmp_path / "o"), "--config", str(bad)],
        ["gen", str(tmp_path / "g"), "--config", str(bad)],
        ["infer", "--checkpoint", str(tmp_path), "--data", data, "--scene", sid],
        ["infer", "--checkpoint", ck, "--data", data, "--scene", "missing"],
        ["infer", "--checkpoint", ck, "--data", data, "--scene", sid, "--dim", "16"],
        ["infer", "--checkpoint", ck, "--data", data, "--scene", sid, "--threshold", "1.0"],
        ["eval", "--checkpoint", ck, "--data", data, "--split", "nosuch"],
    ]
    for argv in cases:
        assert main(argv) == EXIT_DATA, argv
    assert "tga: error:" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exits_4(tmp_path, workspace, capsys):
    code = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "o"),
                 "--steps", "2", "--lr", "1e308", "--clip-norm", "0", *SMALL_MODEL])
    assert code == 4
    assert "numerical failure" in capsys.readouterr().err


def test_train_writes_checkpoint_and_loss_log(workspace):
    ck = workspace / "ck"
    manifest = json.loads((ck / "manifest.json").read_text())
    assert manifest["hyperparameters"]["kind"] == "single"
    assert manifest["hyperparameters"]["train"]["steps"] == 3
    rows = (ck / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss,mask,group" and len(rows) == 4


def infer(workspace, sid, *extra):
    out = workspace / f"infer_{sid}.json"
    assert main(["infer", "--checkpoint", str(workspace / "ck"), "--data",
                 str(workspace / "data"), "--scene", sid, "--out", str(out), *extra]) == EXIT_OK
    return json.loads(out.read_text())


def test_infer_output(workspace):
    sid = scene_ids(workspace)[-1]
    svg = workspace / "overlay.svg"
    doc = infer(workspace, sid, "--svg", str(svg))
    assert doc["scene"] == sid and doc["threshold"] == 0.8
    n = len(doc["instances"])
    assert n == 9
    assert sorted(i for g in doc["groups"] for i in g) == list(range(n))
    for inst in doc["instances"]:
        assert inst["index"] in doc["groups"][inst["group"]]
        assert len(inst["polygon"]) >= 3
    text = svg.read_text()
    assert text.startswith("<svg") and text.count("<polygon") == n


def test_infer_threshold_extremes(workspace):
    sid = scene_ids(workspace)[0]
    # clamped affinities never reach 1 - eps/2, and always exceed eps/2
    high = infer(workspace, sid, "--threshold", str(1 - 0.5e-7))
    assert all(len(g) == 1 for g in high["groups"])
    low = infer(workspace, sid, "--threshold", str(0.5e-7))
    assert len(low["groups"]) == 1


def test_eval_report_schema(tmp_path, workspace, capsys):
    report = tmp_path / "r.json"
    assert main(["eval", "--checkpoint", str(workspace / "ck"), "--data",
                 str(workspace / "data"), "--report", str(report)]) == EXIT_OK
    doc = json.loads(report.read_text())
    assert set(doc) == {"instance", "paragraph"}
    for level in doc.values():
        assert set(level) == set(REPORT_KEYS)
        assert all(0.0 <= level[k] <= 1.0 for k in ("precision", "recall", "f1", "pq"))
    # two eval scenes with nine line detections each
    assert doc["instance"]["tp"] + doc["instance"]["fn"] == 18
    assert json.loads(capsys.readouterr().out) == doc


def test_eval_is_deterministic_across_workers(tmp_path, workspace):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    base = ["eval", "--checkpoint", str(workspace / "ck"), "--data", str(workspace / "data")]
    assert main(base + ["--report", str(a)]) == EXIT_OK
    assert main(base + ["--report", str(b), "--workers", "2"]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_cascade_training(tmp_path, workspace):
    out = tmp_path / "casc"
    assert main(["train", "--data", str(workspace / "data"), "--out", str(out), "--steps", "2",
                 "--cascade", *SMALL_MODEL]) == EXIT_OK
    hyper = json.loads((out / "manifest.json").read_text())["hyperparameters"]
    assert hyper["kind"] == "cascade"
    sid = scene_ids(workspace)[0]
    res = tmp_path / "i.json"
    assert main(["infer", "--checkpoint", str(out), "--data", str(workspace / "data"),
                 "--scene", sid, "--out", str(res)]) == EXIT_OK
    doc = json.loads(res.read_text())
    assert len(doc["instances"]) == 27
