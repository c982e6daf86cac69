import json
import subprocess
import sys

import pytest

from exemplar_cssl import cli

SYNTH = {"num_classes": 4, "dim": 8, "per_class_count": 20, "cluster_std": 1.0, "centroid_scale": 4.0}
TRAIN = {"epochs": 2, "batch_size": 32}
ENC = {"hidden_dims": [16], "embed_dim": 4}


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def call(*argv):
    return cli.main([*argv, "--quiet"] if argv[0] != "report" else list(argv))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert call("gen-data", "--config", write(d / "g.json", {"seed": 3, "synthetic": SYNTH}), "--out", str(d)) == 0
    return d / "dataset.json"


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory, dataset):
    d = tmp_path_factory.mktemp("pre")
    conf = write(d / "p.json", {"dataset": str(dataset), "encoder": ENC, "train": TRAIN})
    assert call("pretrain", "--config", conf, "--out", str(d / "run")) == 0
    return d / "run"


def test_gen_data_manifest_and_determinism(tmp_path, dataset):
    manifest = json.loads((dataset.parent / "manifest.json").read_text())
    assert manifest["seed"] == manifest["config"]["seed"] == 3
    assert manifest["config_hash"] == cli.config_hash(manifest["config"])
    conf = write(tmp_path / "g.json", {"seed": 3, "synthetic": SYNTH})
    assert call("gen-data", "--config", conf, "--out", str(tmp_path / "again")) == 0
    assert (tmp_path / "again" / "dataset.json").read_bytes() == dataset.read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    conf = write(tmp_path / "g.json", {"seed": 3, "synthetic": SYNTH})
    assert call("gen-data", "--config", conf, "--out", str(tmp_path), "--seed", "9") == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 9


def test_malformed_json_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert call("gen-data", "--config", str(bad), "--out", str(tmp_path)) == 2
    assert "cannot parse" in capsys.readouterr().err


def test_invalid_config_is_usage_error(tmp_path, capsys):
    assert call("gen-data", "--config", write(tmp_path / "c.json", {"synthetic": {"num_classes": 1}}), "--out", str(tmp_path)) == 2
    assert call("gen-data", "--config", write(tmp_path / "c.json", {"colour": "red"}), "--out", str(tmp_path)) == 2
    assert "invalid config" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert call("gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)) == 3


def test_pretrain_then_finetune(tmp_path, dataset, pretrained):
    for name in ("checkpoint.json", "history.csv", "metrics.json", "manifest.json"):
        assert (pretrained / name).exists()
    conf = write(tmp_path / "f.json", {"dataset": str(dataset), "checkpoint": str(pretrained / "checkpoint.json"), "train": TRAIN})
    assert call("finetune", "--config", conf, "--out", str(tmp_path)) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert 0.0 <= metrics["test_accuracy"] <= 1.0


def test_dangling_checkpoint(tmp_path, dataset):
    conf = write(tmp_path / "f.json", {"dataset": str(dataset), "checkpoint": str(tmp_path / "gone.json")})
    assert call("finetune", "--config", conf, "--out", str(tmp_path)) == 3


def test_missing_dataset(tmp_path):
    conf = write(tmp_path / "p.json", {"dataset": str(tmp_path / "gone.json"), "train": TRAIN})
    assert call("pretrain", "--config", conf, "--out", str(tmp_path)) == 3


def test_numeric_abort_exit_code(tmp_path, dataset, capsys):
    train = {**TRAIN, "optimizer": "sgd", "lr": 1e300}
    conf = write(tmp_path / "f.json", {"dataset": str(dataset), "encoder": ENC, "train": train})
    assert call("fewshot", "--config", conf, "--out", str(tmp_path)) == 4
    assert "batch id" in capsys.readouterr().err


def test_eval_metrics(tmp_path, dataset, pretrained):
    ck = str(pretrained / "checkpoint.json")
    conf = write(tmp_path / "e.json", {"dataset": str(dataset), "checkpoint": ck, "metrics": ["separation_ratio"]})
    assert call("eval", "--config", conf, "--out", str(tmp_path / "a")) == 0
    assert call("eval", "--config", conf, "--out", str(tmp_path / "b")) == 0
    first = (tmp_path / "a" / "metrics.json").read_bytes()
    assert list(json.loads(first)) == ["separation_ratio"]
    assert first == (tmp_path / "b" / "metrics.json").read_bytes()


def test_eval_unknown_metric(tmp_path, dataset, pretrained, capsys):
    conf = write(tmp_path / "e.json", {"dataset": str(dataset), "checkpoint": str(pretrained / "checkpoint.json"), "metrics": ["f1"]})
    assert call("eval", "--config", conf, "--out", str(tmp_path)) == 2
    assert "linear_probe" in capsys.readouterr().err


def test_manifest_rerun_is_bit_identical(tmp_path, pretrained):
    assert call("pretrain", "--config", str(pretrained / "manifest.json"), "--out", str(tmp_path)) == 0
    for name in ("checkpoint.json", "history.csv", "metrics.json"):
        assert (tmp_path / name).read_bytes() == (pretrained / name).read_bytes()


def test_manifest_for_other_command_rejected(tmp_path, pretrained):
    assert call("fewshot", "--config", str(pretrained / "manifest.json"), "--out", str(tmp_path)) == 2


def test_ncl_and_fewshot_run(tmp_path, dataset):
    ncl = {"dataset": str(dataset), "encoder": ENC, "train": TRAIN, "known_classes": [0, 1], "num_novel": 2}
    assert call("ncl", "--config", write(tmp_path / "n.json", ncl), "--out", str(tmp_path / "n")) == 0
    assert "cluster_accuracy" in json.loads((tmp_path / "n" / "metrics.json").read_text())
    few = {"dataset": str(dataset), "encoder": ENC, "train": TRAIN, "labeled_fraction": 0.5}
    assert call("fewshot", "--config", write(tmp_path / "f.json", few), "--out", str(tmp_path / "f")) == 0


def test_cil_arms_compare_in_report(tmp_path, dataset, capsys):
    paths = []
    for arm in ("none", "erg"):
        conf = {
            "dataset": str(dataset), "encoder": ENC, "base_train": TRAIN,
            "protocol": {"base_classes": [0, 1], "sessions": [[2], [3]], "shots": 3, "test_per_class": 5},
            "cil": {"distill": arm, "session_epochs": 2, "k_exemplars": 3},
        }
        out = tmp_path / arm
        assert call("cil", "--config", write(tmp_path / f"{arm}.json", conf), "--out", str(out)) == 0
        paths.append(str(out / "metrics.json"))
    capsys.readouterr()
    assert call("report", *paths) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    header = lines[0].split(",")
    assert header[0] == "run" and "session_2_base_acc" in header and "base_forgetting" in header
    assert len(lines) == 3


def test_report_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["report"])
    assert info.value.code == 2
    assert call("report", str(tmp_path / "missing.json")) == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "exemplar_cssl", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
