import csv
import json
import sys

import numpy as np
import pytest

from querypatch import load_patch_bundle, read_png, write_png
from querypatch.cli import main

from synthdigits import make_digits, write_idx


@pytest.fixture(scope="module")
def idx_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("idx")
    images, labels = make_digits(160, seed=31)
    write_idx(images, labels, root / "im.idx", root / "lab.idx")
    return root


@pytest.fixture(scope="module")
def model_file(tmp_path_factory, idx_files):
    root = tmp_path_factory.mktemp("model")
    path = root / "lin.json"
    rc = main(["train-oracle", "--images", str(idx_files / "im.idx"),
               "--labels", str(idx_files / "lab.idx"), "--kind", "linear",
               "--epochs", "2", "--lr", "0.2", "--seed", "1",
               "--out", str(path)])
    assert rc == 0
    return path


def _attack_args(idx_files, model_file, out, budget="600", extra=()):
    return ["attack",
            "--images", str(idx_files / "im.idx"),
            "--labels", str(idx_files / "lab.idx"),
            "--oracle-builtin", str(model_file),
            "--side", "3", "--batch-size", "6", "--eot", "1",
            "--q", "2", "--budget", budget,
            "--location", "13,13", "--seed", "7",
            "--out", str(out), *extra]


# ---------------------------------------------------------------------------

def test_train_oracle_writes_model(model_file):
    doc = json.loads(model_file.read_text())
    assert doc["format"] == "querypatch-model-v1"
    assert doc["metadata"]["train_accuracy"] > 0.9
    assert "cli_config_sha256" in doc["metadata"]


def test_train_oracle_missing_out(idx_files, capsys):
    rc = main(["train-oracle", "--images", str(idx_files / "im.idx"),
               "--labels", str(idx_files / "lab.idx")])
    assert rc == 2
    assert "--out" in capsys.readouterr().err


def test_train_oracle_bad_idx(tmp_path, capsys):
    (tmp_path / "junk.idx").write_bytes(b"AAAA")
    rc = main(["train-oracle", "--images", str(tmp_path / "junk.idx"),
               "--labels", str(tmp_path / "junk.idx"),
               "--out", str(tmp_path / "m.json")])
    assert rc == 2


def test_attack_produces_artifacts(tmp_path, idx_files, model_file):
    out = tmp_path / "run"
    rc = main(_attack_args(idx_files, model_file, out))
    assert rc == 0
    patch, meta = load_patch_bundle(out)
    assert patch.side == 3
    assert meta["provenance"]["oracle_id"] == "lin"
    doc = json.loads((out / "attack.json").read_text())
    assert doc["queries_used"] <= 600
    rows = list(csv.reader((out / "history.csv").open()))
    assert rows[0] == ["step", "queries", "objective", "best_objective"]
    assert len(rows) == doc["steps"] + 1


def test_attack_deterministic_artifacts(tmp_path, idx_files, model_file):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(_attack_args(idx_files, model_file, out1)) == 0
    assert main(_attack_args(idx_files, model_file, out2)) == 0
    for name in ("patch.png", "mask.png", "history.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_attack_via_subprocess_oracle(tmp_path, idx_files, model_file):
    out = tmp_path / "run"
    cmd = f"{sys.executable} -m querypatch.stub_oracle --model {model_file}"
    rc = main(["attack",
               "--images", str(idx_files / "im.idx"),
               "--labels", str(idx_files / "lab.idx"),
               "--oracle-cmd", cmd, "--shape", "28", "28", "1", "--classes", "10",
               "--side", "3", "--batch-size", "4", "--eot", "1",
               "--q", "2", "--budget", "200", "--location", "13,13",
               "--seed", "7", "--out", str(out)])
    assert rc == 0
    assert (out / "patch.png").exists()


def test_attack_no_oracle(tmp_path, idx_files, capsys):
    rc = main(["attack", "--images", str(idx_files / "im.idx"),
               "--labels", str(idx_files / "lab.idx"),
               "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "oracle" in capsys.readouterr().err


def test_attack_two_oracles(tmp_path, idx_files, model_file, capsys):
    rc = main(_attack_args(idx_files, model_file, tmp_path / "x",
                           extra=["--oracle-http", "http://localhost:1"]))
    assert rc == 2
    assert "exactly one" in capsys.readouterr().err


def test_attack_bad_stop_string(tmp_path, idx_files, model_file, capsys):
    rc = main(_attack_args(idx_files, model_file, tmp_path / "x",
                           extra=["--stop", "sometimes"]))
    assert rc == 2


def test_attack_remote_oracle_down(tmp_path, idx_files, capsys):
    rc = main(["attack", "--images", str(idx_files / "im.idx"),
               "--labels", str(idx_files / "lab.idx"),
               "--oracle-http", "http://127.0.0.1:1",
               "--shape", "28", "28", "1", "--classes", "10",
               "--budget", "100", "--out", str(tmp_path / "x")])
    assert rc == 1  # runtime failure, not usage
    assert "runtime error" in capsys.readouterr().err


def test_eval_clean_json(tmp_path, idx_files, model_file, capsys):
    out = tmp_path / "r.json"
    rc = main(["eval", "--images", str(idx_files / "im.idx"),
               "--labels", str(idx_files / "lab.idx"),
               "--oracle-builtin", str(model_file), "--out", str(out)])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["type"] == "eval_report"
    assert doc["patched_accuracy"] is None
    assert "clean=" in capsys.readouterr().out


def test_eval_patched_csv(tmp_path, idx_files, model_file):
    run = tmp_path / "run"
    assert main(_attack_args(idx_files, model_file, run)) == 0
    out = tmp_path / "r.csv"
    rc = main(["eval", "--images", str(idx_files / "im.idx"),
               "--labels", str(idx_files / "lab.idx"),
               "--oracle-builtin", str(model_file),
               "--patch", str(run), "--format", "csv", "--out", str(out)])
    assert rc == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["trained_on", "tested_on", "clean_acc", "patched_acc", "n"]
    assert rows[1][0] == "lin"  # trained-on id comes from bundle provenance
    assert rows[1][1] == "lin"


def test_eval_transfer_grid(tmp_path, idx_files, model_file):
    run = tmp_path / "run"
    assert main(_attack_args(idx_files, model_file, run)) == 0
    out = tmp_path / "tm.csv"
    rc = main(["eval", "--images", str(idx_files / "im.idx"),
               "--labels", str(idx_files / "lab.idx"),
               "--oracle-builtin", str(model_file),
               "--oracle-builtin", str(model_file),
               "--transfer", "--patch", str(run),
               "--format", "csv", "--out", str(out)])
    assert rc == 2  # duplicate oracle ids must be rejected, not silently merged


def test_eval_split_selection(tmp_path, idx_files, model_file):
    out_a = tmp_path / "a.json"
    out_b = tmp_path / "b.json"
    common = ["eval", "--images", str(idx_files / "im.idx"),
              "--labels", str(idx_files / "lab.idx"),
              "--oracle-builtin", str(model_file),
              "--train-split", "40", "--split-seed", "3"]
    assert main(common + ["--use-split", "train", "--out", str(out_a)]) == 0
    assert main(common + ["--use-split", "eval", "--out", str(out_b)]) == 0
    a = json.loads(out_a.read_text())
    b = json.loads(out_b.read_text())
    assert a["n"] == 40 and b["n"] == 120


def test_config_file_merging(tmp_path, idx_files, model_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"side": 4, "budget": 300, "q": 2,
                               "batch_size": 5, "eot": 1,
                               "location": "13,13", "seed": 7}))
    out = tmp_path / "run"
    rc = main(["attack", "--config", str(cfg),
               "--images", str(idx_files / "im.idx"),
               "--labels", str(idx_files / "lab.idx"),
               "--oracle-builtin", str(model_file),
               "--side", "3",  # CLI beats config
               "--out", str(out)])
    assert rc == 0
    doc = json.loads((out / "attack.json").read_text())
    assert doc["config"]["patch_side"] == 3
    assert doc["config"]["budget"] == 300


def test_config_file_unknown_key(tmp_path, idx_files, model_file, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sidd": 4}))
    rc = main(_attack_args(idx_files, model_file, tmp_path / "x",
                           extra=["--config", str(cfg)]))
    assert rc == 2
    assert "sidd" in capsys.readouterr().err


def test_apply_fixed_pose(tmp_path, idx_files, model_file):
    run = tmp_path / "run"
    assert main(_attack_args(idx_files, model_file, run)) == 0
    img = np.zeros((28, 28, 1))
    write_png(tmp_path / "in.png", img)
    rc = main(["apply", "--patch", str(run), "--image", str(tmp_path / "in.png"),
               "--out", str(tmp_path / "out.png"), "--pose", "13,13,0,1"])
    assert rc == 0
    out = read_png(tmp_path / "out.png", channels=1)
    patch, _ = load_patch_bundle(run)
    assert np.allclose(out[12:15, 12:15], patch.pixels, atol=1 / 255)
    assert np.all(out[:10] == 0.0)


def test_apply_sampled_pose_deterministic(tmp_path, idx_files, model_file):
    run = tmp_path / "run"
    assert main(_attack_args(idx_files, model_file, run)) == 0
    write_png(tmp_path / "in.png", np.zeros((28, 28, 1)))
    for name in ("o1.png", "o2.png"):
        rc = main(["apply", "--patch", str(run),
                   "--image", str(tmp_path / "in.png"),
                   "--out", str(tmp_path / name), "--seed", "5"])
        assert rc == 0
    assert (tmp_path / "o1.png").read_bytes() == (tmp_path / "o2.png").read_bytes()


def test_apply_missing_bundle(tmp_path, capsys):
    write_png(tmp_path / "in.png", np.zeros((8, 8, 1)))
    rc = main(["apply", "--patch", str(tmp_path / "nope"),
               "--image", str(tmp_path / "in.png"),
               "--out", str(tmp_path / "out.png")])
    assert rc == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "querypatch" in capsys.readouterr().out
