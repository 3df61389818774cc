import csv
import json

import pytest

from vqcpc.cli import main
from vqcpc.pipeline import ConfigError, PipelineConfig, load_config

SMALL_CONFIG = {
    "synth": {"participants": 5, "seconds_per_segment": 6.0, "segments_per_class": 1},
    "train": {"max_epochs": 1, "batch": 32},
    "model": {"encoder": {"channels": [8, 8, 16, 16]}, "aggregator": {"filters": 16}, "vars": 8},
    "classifier": {"embedding_dim": 8, "hidden": 8, "mlp": [16, 8], "epochs": 2, "batch": 64},
    "protocol": {"n_folds": 1, "repeats": 1},
    "lm": {"epochs": 1},
    "sax_repeat_k": 8,
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """synth -> ingest -> pretrain once for the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL_CONFIG))
    common = ["--config", str(cfg), "--seed", "1"]
    assert main(["synth", "--out", str(root / "csv"), *common]) == 0
    assert main(["ingest", "--data", str(root / "csv"), "--out", str(root / "data"), *common]) == 0
    assert main(["pretrain", "--data", str(root / "data"), "--out", str(root / "model.ckpt"), *common]) == 0
    return root, common


def test_stage_outputs(run):
    root, _ = run
    assert len(list((root / "csv").glob("*.csv"))) == 5
    for p in ("data/windows.npz", "data/folds.json", "data/manifest.json", "model.ckpt", "model.manifest.json"):
        assert (root / p).exists(), p
    manifest = json.loads((root / "model.manifest.json").read_text())
    assert manifest["seed"] == 1 and len(manifest["config_hash"]) == 64
    assert set(manifest["versions"]) >= {"python", "numpy", "torch"}
    assert manifest["config"]["train"]["max_epochs"] == 1


def test_extract_sax_lm_classify_analyze(run):
    root, common = run
    assert main(["extract", "--checkpoint", str(root / "model.ckpt"), "--data", str(root / "data"), "--out", str(root / "vq"), *common]) == 0
    assert main(["sax", "--data", str(root / "data"), "--out", str(root / "sax"), *common]) == 0
    assert main(["sax", "--repeat", "--data", str(root / "data"), "--out", str(root / "saxr"), *common]) == 0
    assert main(["lm", "--tokens", str(root / "vq"), "--out", str(root / "lm"), *common]) == 0
    grid = root / "grid.json"
    grid.write_text(json.dumps({"lr": [1e-3, 5e-4], "l2": [0.0]}))
    for name, extra in (("vq", []), ("sax", []), ("saxr", []), ("vq_frozen", ["--embeddings", str(root / "lm" / "embeddings.bin")])):
        tokens = root / name.split("_")[0]
        code = main(["classify", "--tokens", str(tokens), "--folds", str(root / "data" / "folds.json"),
                     "--grid", str(grid), "--out", str(root / f"report_{name}.json"), *extra, *common])
        assert code == 0, name
        report = json.loads((root / f"report_{name}.json").read_text())
        assert len(report["grid"]) == 2 and "runtime_s" in report and report["runs"]
        assert report["test_reads_during_selection"] == 0
    assert main(["analyze", "--histograms", "--tokens", str(root / "vq"), "--out", str(root / "analysis"), *common]) == 0
    sums = {}
    with (root / "analysis" / "histograms.csv").open() as fh:
        for row in csv.DictReader(fh):
            sums[row["class"]] = sums.get(row["class"], 0.0) + float(row["fraction"])
    assert sums and all(abs(v - 1.0) < 1e-9 for v in sums.values())
    assert list((root / "analysis" / "figures").glob("*.png"))
    with (root / "vq" / "usage.csv").open() as fh:
        assert next(csv.reader(fh)) == ["codeword", "count"]


def test_extract_without_checkpoint(run, capsys):
    root, common = run
    assert main(["extract", "--data", str(root / "data"), "--out", str(root / "x"), *common]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_missing_inputs(tmp_path, capsys):
    assert main(["pretrain", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "m.ckpt")]) == 2
    assert "ingest" in capsys.readouterr().err
    assert main(["classify", "--tokens", str(tmp_path), "--out", str(tmp_path / "r.json")]) == 2
    assert main(["extract", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path), "--out", str(tmp_path)]) == 2


def test_bad_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["synth", "--out", str(tmp_path / "s"), "--config", str(bad)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_config_layering(tmp_path):
    a = tmp_path / "a.toml"
    a.write_text('seed = 4\n[train]\nmax_epochs = 7\nlr = 0.01\n')
    b = tmp_path / "b.json"
    b.write_text(json.dumps({"train": {"lr": 0.5}}))
    cfg = load_config([a, b], {"seed": 9})
    assert cfg.train.max_epochs == 7 and cfg.train.lr == 0.5
    assert cfg.seed == cfg.train.seed == cfg.classifier.seed == cfg.lm.seed == 9
    assert cfg.train.l2 == PipelineConfig().train.l2
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        load_config(overrides={"nope": 1})


def test_repro_fast_identical_manifests(tmp_path, capsys):
    codes = [main(["repro", "--fast", "--seed", "7", "--out", str(tmp_path / d)]) for d in ("a", "b")]
    out = capsys.readouterr().out
    assert "vq_f1>=0.80" in out and ("PASS" in out or "FAIL" in out)
    assert codes[0] == codes[1] and codes[0] in (0, 1)
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    checks = json.loads((tmp_path / "a" / "checks.json").read_text())
    assert codes[0] == (0 if all(c["passed"] for c in checks) else 1)
