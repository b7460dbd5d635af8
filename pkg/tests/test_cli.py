import csv
import json

import numpy as np
import pytest

from panoexplore.cli import heatmap_image, main
from panoexplore.config import ConfigError, from_dict, load_config
from panoexplore.dataset import load_manifest


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(root), "--count", "20", "--seed", "4", "--test-every", "5"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "train"
    args = ["train", "--manifest", str(corpus / "manifest.jsonl"), "--out", str(out), "--profile", "micro"]
    args += ["--epochs", "2", "--batch-size", "8", "--glimpses", "3", "--checkpoint-every", "2"]
    assert main(args) == 0
    return out


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# config


def test_config_defaults_roundtrip():
    cfg = from_dict({})
    again = from_dict(json.loads(cfg.to_json()))
    assert again.to_json() == cfg.to_json()
    assert json.loads(cfg.to_json())["train"]["glimpses"] == 8


@pytest.mark.parametrize(
    "raw",
    [
        {"colour": 1},
        {"train": {"glimpse": 3}},
        {"eval": {"policies": ["psychic"]}},
        {"profile": "enormous"},
        {"train": {"lr": -1.0}},
        {"eval": {"glimpses": 0}},
        {"data": []},
    ],
)
def test_config_rejects(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_load_config_errors(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text("{\n  oops")
    with pytest.raises(ConfigError, match=":2:"):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_valid_corpus(corpus):
    m = load_manifest(corpus / "manifest.jsonl")
    assert len(m.entries) == 20
    assert len(m.split("test")) == 4
    assert json.loads((corpus / "config.json").read_text())["synth"]["count"] == 20
    assert not (corpus / ".lock").exists()


def test_synth_is_deterministic(corpus, tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--count", "20", "--seed", "4", "--test-every", "5"]) == 0
    assert (tmp_path / "manifest.jsonl").read_bytes() == (corpus / "manifest.jsonl").read_bytes()
    for img in sorted((corpus / "images").iterdir()):
        assert (tmp_path / "images" / img.name).read_bytes() == img.read_bytes()


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoints_and_metrics(trained):
    assert (trained / "checkpoint_final.pxck").exists()
    assert (trained / "checkpoint_000002.pxck").exists()
    r = rows(trained / "metrics.csv")
    assert [int(x["iteration"]) for x in r] == [1, 2, 3, 4]
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["profile"] == "micro" and cfg["train"]["epochs"] == 2


def test_train_resume_continues_numbering(corpus, trained, tmp_path):
    args = ["train", "--manifest", str(corpus / "manifest.jsonl"), "--out", str(tmp_path), "--profile", "micro"]
    args += ["--epochs", "2", "--batch-size", "8", "--glimpses", "3", "--resume", str(trained / "checkpoint_000002.pxck")]
    assert main(args) == 0
    resumed = rows(tmp_path / "metrics.csv")
    assert [int(x["iteration"]) for x in resumed] == [3, 4]
    assert [x["total"] for x in resumed] == [x["total"] for x in rows(trained / "metrics.csv")[2:]]


def test_rerun_from_saved_config_reproduces(trained, tmp_path):
    assert main(["train", "--config", str(trained / "config.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()


def test_train_init_transfers_weights(corpus, trained, tmp_path):
    args = ["train", "--manifest", str(corpus / "manifest.jsonl"), "--out", str(tmp_path / "t"), "--profile", "micro"]
    args += ["--epochs", "1", "--batch-size", "8", "--glimpses", "3", "--init", str(trained / "checkpoint_final.pxck")]
    assert main(args + ["--classification", "from-recon"]) == 0
    assert rows(tmp_path / "t" / "metrics.csv")[0]["L_class"] != ""
    assert main(args[:4] + [str(tmp_path / "u")] + args[5:]) == 2
    assert not (tmp_path / "u").exists()


def test_invalid_config_key_exits_2_without_outputs(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"epochz": 1}}))
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert "epochz" in capsys.readouterr().err


def test_missing_manifest_exits_2(tmp_path):
    out = tmp_path / "out"
    assert main(["train", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(out), "--profile", "micro"]) == 2
    assert not out.exists()


def test_locked_output_exits_3(corpus, tmp_path):
    (tmp_path / ".lock").write_text("123")
    args = ["train", "--manifest", str(corpus / "manifest.jsonl"), "--out", str(tmp_path), "--profile", "micro"]
    assert main(args + ["--epochs", "1"]) == 3
    assert not (tmp_path / "metrics.csv").exists()


def test_bad_flag_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["eval", "--policy", "psychic"])
    assert e.value.code == 2


# ---------------------------------------------------------------------------
# eval and report


def eval_args(corpus, out, *extra):
    return ["eval", "--manifest", str(corpus / "manifest.jsonl"), "--out", str(out), "--profile", "micro", *extra]


def test_eval_gt_oracle_needs_no_checkpoint(corpus, tmp_path):
    assert main(eval_args(corpus, tmp_path, "--policy", "gt-oracle", "--glimpses", "3", "--eval-seeds", "1")) == 0
    assert len(rows(tmp_path / "curves.csv")) == 3


def test_eval_learned_needs_checkpoint(corpus, tmp_path):
    out = tmp_path / "o"
    assert main(eval_args(corpus, out, "--policy", "learned")) == 2
    assert not out.exists()


def test_eval_table_and_curves(corpus, trained, tmp_path):
    policies = ["learned", "random", "neighborhood"]
    args = eval_args(corpus, tmp_path, "--checkpoint", str(trained / "checkpoint_final.pxck"), "--glimpses", "4")
    for p in policies:
        args += ["--policy", p]
    assert main(args + ["--eval-seeds", "2"]) == 0
    curves = rows(tmp_path / "curves.csv")
    assert len(curves) == 4 * len(policies)
    assert {c["samples"] for c in curves} == {"8"}
    table = (tmp_path / "table.txt").read_text().splitlines()
    assert len(table) == 3 + len(policies)


def test_report_renders_curves(corpus, tmp_path, capsys):
    main(eval_args(corpus, tmp_path / "e", "--policy", "random", "--glimpses", "2", "--eval-seeds", "1"))
    capsys.readouterr()
    assert main(["report", str(tmp_path / "e" / "curves.csv"), "--reference", "--out", str(tmp_path / "r")]) == 0
    text = capsys.readouterr().out
    assert "with Random Selection" in text and "Learning to Look Around" in text
    assert (tmp_path / "r" / "table.txt").read_text() == text


def test_report_bad_file_exits_2(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    assert main(["report", str(tmp_path / "x.csv")]) == 2


# ---------------------------------------------------------------------------
# explore


def explore_args(corpus, trained, out, seed="0"):
    image = sorted((corpus / "images").iterdir())[0]
    return ["explore", "--checkpoint", str(trained / "checkpoint_final.pxck"), "--image", str(image)] + [
        "--glimpses", "5", "--seed", seed, "--out", str(out)
    ]


def test_explore_five_steps(corpus, trained, tmp_path):
    assert main(explore_args(corpus, trained, tmp_path)) == 0
    assert len(list(tmp_path.glob("recon_*.png"))) == 5
    assert len(list(tmp_path.glob("heatmap_*.png"))) == 5
    assert len(list(tmp_path.glob("footprint_*.png"))) == 5
    trace = json.loads((tmp_path / "trace.json").read_text())
    assert [s["step"] for s in trace["steps"]] == [1, 2, 3, 4, 5]
    patches = [s["patch"] for s in trace["steps"]]
    assert len(set(patches)) == 5
    for s in trace["steps"]:
        assert len(s["attention"]) == 128
        assert abs(sum(s["attention"]) - 1) < 1e-9
    # the distribution after a step puts no mass on visited patches
    for t, s in enumerate(trace["steps"]):
        assert all(s["attention"][p] == 0 for p in patches[: t + 1])


def test_explore_is_deterministic(corpus, trained, tmp_path):
    assert main(explore_args(corpus, trained, tmp_path / "a", seed="3")) == 0
    assert main(explore_args(corpus, trained, tmp_path / "b", seed="3")) == 0
    assert (tmp_path / "a" / "trace.json").read_bytes() == (tmp_path / "b" / "trace.json").read_bytes()


def test_heatmap_uniform_is_constant():
    img = heatmap_image(np.full(128, 1 / 128), 8, 16)
    assert img.shape == (128, 256) and np.all(img == 255)
    peaked = np.zeros(128)
    peaked[17] = 1.0
    img = heatmap_image(peaked, 8, 16)
    assert img[16:32, 16:32].min() == 255 and img.sum() == 255 * 256
