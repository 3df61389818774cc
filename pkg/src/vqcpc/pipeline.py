"""Layered pipeline configuration, provenance manifests and the desk-scale reproduction.

`run_repro` chains every stage on synthetic data and evaluates the ordinal
checks; the CLI's `repro` subcommand is a thin wrapper around it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import platform
import time
import typing
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import __version__
from .classifier import ClassifierConfig, SplitAccessLog, run_protocol
from .aggregator import AggregatorConfig
from .datapipe import (
    NormStats,
    Recording,
    SensorWindow,
    apply_norm,
    fit_norm,
    make_folds,
    resample,
    synth_dataset,
    window,
)
from .encoder import EncoderConfig
from .lm import LMConfig, masked_metrics, pretrain_lm
from .pretrainer import ModelConfig, TrainConfig, extract_tokens, pretrain, save_checkpoint
from .quantizer import usage_stats, write_usage_csv
from .sax import FewerTuplesThanClusters, SaxConfig, SaxRepeat, sax_discretize
from .tokens import TokenSequence, build_vocab, class_histograms, frame_corpus, write_corpus, write_histograms_csv

logger = logging.getLogger(__name__)


class MissingInput(FileNotFoundError):
    """An upstream artifact needed by a stage does not exist."""


class ConfigError(ValueError):
    pass


# --- configuration --------------------------------------------------------


@dataclass
class SynthConfig:
    participants: int = 10
    classes: int = 4
    seconds_per_segment: float = 20.0
    segments_per_class: int = 2
    noise: float = 0.05


@dataclass
class WindowConfig:
    length: int = 100
    pretrain_overlap: float = 0.0
    eval_overlap: float = 0.5
    target_hz: Optional[float] = None  # None keeps the recorded rate


@dataclass
class ProtocolConfig:
    plan_folds: int = 5  # folds in the saved plan
    n_folds: int = 2  # folds actually run
    repeats: int = 2
    grid: dict = field(default_factory=lambda: {"lr": [1e-3], "l2": [0.0]})
    lm_n_folds: int = 1
    lm_repeats: int = 1


@dataclass
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    # unlabelled stand-in for a large pre-training corpus, drawn from a different seed
    pretrain_synth: SynthConfig = field(default_factory=lambda: SynthConfig(participants=8))
    pretrain_val_frac: float = 0.2
    window: WindowConfig = field(default_factory=WindowConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=20))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vars=20))
    sax: SaxConfig = field(default_factory=SaxConfig)
    sax_repeat_k: int = 512
    classifier: ClassifierConfig = field(default_factory=lambda: ClassifierConfig(epochs=15))
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    lm: LMConfig = field(default_factory=LMConfig)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d, "config")

    def seeded(self, seed: Optional[int]) -> "PipelineConfig":
        """Copy with `seed` (when given) pushed into every stage seed."""
        cfg = PipelineConfig.from_dict(self.to_dict())
        if seed is not None:
            cfg.seed = seed
        cfg.train.seed = cfg.classifier.seed = cfg.lm.seed = cfg.seed
        return cfg


def fast_config(seed: int = 0) -> PipelineConfig:
    """Minutes-scale settings for smoke runs; the acceptance thresholds are not expected to hold."""
    cfg = PipelineConfig(seed=seed)
    cfg.synth = SynthConfig(participants=5, seconds_per_segment=6.0, segments_per_class=1)
    cfg.pretrain_synth = SynthConfig(participants=3, seconds_per_segment=6.0, segments_per_class=1)
    cfg.train = TrainConfig(max_epochs=2, batch=32, early_stop_min_epoch=2)
    cfg.model = ModelConfig(EncoderConfig(channels=(8, 16, 16, 32)), AggregatorConfig(filters=32), vars=20)
    cfg.classifier = ClassifierConfig(embedding_dim=16, hidden=16, mlp=(32, 16), epochs=2, batch=64)
    cfg.protocol = ProtocolConfig(n_folds=1, repeats=1)
    cfg.lm = LMConfig(epochs=2)
    cfg.sax_repeat_k = 16
    return cfg.seeded(seed)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}; valid keys are {sorted(names)}")
    kwargs = {}
    for key, val in data.items():
        hint = hints.get(key)
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, val, f"{where}.{key}")
        else:
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "grid":
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"config file {path} does not exist")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(path.read_text())
    if path.suffix.lower() == ".json":
        return json.loads(path.read_text())
    raise ConfigError(f"{path}: config files must be .toml or .json")


def load_config(paths=(), overrides: Optional[dict] = None, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """Defaults, then each config file in order, then explicit overrides."""
    merged = (base or PipelineConfig()).to_dict()
    for p in paths:
        merged = deep_merge(merged, read_config_file(p))
    if overrides:
        merged = deep_merge(merged, overrides)
    cfg = PipelineConfig.from_dict(merged)
    return cfg.seeded(cfg.seed)


def config_hash(cfg) -> str:
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# --- provenance -----------------------------------------------------------


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import scipy

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "vqcpc": __version__,
    }


def write_manifest(path, stage: str, cfg: PipelineConfig, inputs: dict = None, outputs=(), metrics: dict = None) -> dict:
    """Provenance record without wall-clock data, so reruns compare byte-for-byte."""
    path = Path(path)
    manifest = {
        "stage": stage,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "versions": versions(),
        "inputs": inputs or {},
        "outputs": {Path(p).name: file_sha256(p) for p in outputs},
        "metrics": metrics or {},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def require(path, what: str, hint: str):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"{what} not found at {path}; {hint}")
    return path


# --- dataset assembly -----------------------------------------------------


@dataclass
class WindowSet:
    pretrain: list  # non-overlapping windows
    evaluation: list  # overlapping windows for classification
    participants: list


def windows_from_recordings(recs: list[Recording], cfg: WindowConfig) -> WindowSet:
    if cfg.target_hz is not None:
        recs = [resample(r, cfg.target_hz) for r in recs]
    pre = [w for r in recs for w in window(r, cfg.length, cfg.pretrain_overlap)]
    ev = [w for r in recs for w in window(r, cfg.length, cfg.eval_overlap)]
    return WindowSet(pre, ev, [r.participant_id for r in recs])


def synth_recordings(cfg: SynthConfig, seed: int) -> list[Recording]:
    return synth_dataset(cfg.participants, cfg.classes, seed, cfg.seconds_per_segment, cfg.segments_per_class, cfg.noise)


def pretrain_split(participants: list, val_frac: float, seed: int) -> tuple[list, list]:
    """Seeded participant split for self-supervised training and validation."""
    order = [participants[i] for i in np.random.default_rng(seed).permutation(len(participants))]
    n_val = max(1, int(round(val_frac * len(order))))
    if n_val >= len(order):
        raise ConfigError("need at least two participants to split pre-training data")
    return sorted(order[n_val:]), sorted(order[:n_val])


def pretrain_on_windows(windows: list[SensorWindow], participants: list, cfg: PipelineConfig, log_every: int = 1):
    """Participant split, normalization fit on the training part, then pre-training."""
    train_p, val_p = pretrain_split(participants, cfg.pretrain_val_frac, cfg.seed)
    tr = [w for w in windows if w.participant_id in set(train_p)]
    va = [w for w in windows if w.participant_id in set(val_p)]
    stats = fit_norm(tr)
    state = pretrain(apply_norm(tr, stats), apply_norm(va, stats), cfg.train, cfg.model, log_every=log_every)
    state.extra = {"norm": stats.to_dict(), "train_participants": train_p, "val_participants": val_p}
    return state


def vq_tokens(state, windows: list[SensorWindow]) -> list[TokenSequence]:
    stats = NormStats.from_dict(state.extra["norm"])
    return extract_tokens(state, apply_norm(windows, stats))


def sax_tokens(windows: list[SensorWindow], cfg: SaxConfig) -> list[TokenSequence]:
    return [sax_discretize(w, cfg) for w in windows]


def sax_repeat_tokens(fit_windows, windows, cfg: SaxConfig, k: int, seed: int) -> list[TokenSequence]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FewerTuplesThanClusters)
        model = SaxRepeat(cfg, k, seed).fit(fit_windows)
    return model.transform(windows)


def periodic_lm_check(seed: int = 0, epochs: int = 15) -> dict:
    """Masked-token accuracy of the tiny LM on a strictly alternating corpus."""
    corpus = [TokenSequence([0, 1] * 12) for _ in range(64)]
    vocab = build_vocab(corpus)
    framed = frame_corpus(corpus, vocab)
    cfg = LMConfig(epochs=epochs, batch=16, seed=seed)
    t0 = time.time()
    result = pretrain_lm(framed, vocab, cfg)
    return {"accuracy": masked_metrics(result.model, framed, cfg)["accuracy"], "seconds": time.time() - t0}


def static_concentration(corpus: list[TokenSequence]) -> dict:
    """Top-token share per class; a near-static class should be the most concentrated."""
    hists = class_histograms(corpus)
    return {int(c): max(h.values()) for c, h in hists.items()}


# --- desk reproduction ----------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _strip_runtime(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "runtime_s"}


def run_repro(cfg: PipelineConfig, out_dir=None, log: Callable[[str], None] = logger.info) -> dict:
    """Run the whole desk-scale pipeline and evaluate the ordinal checks.

    Returns {"metrics", "timings", "checks"}; `metrics` is deterministic for a
    fixed seed in single-threaded mode, `timings` is not.
    """
    torch.set_num_threads(1)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    timings, metrics, artifacts = {}, {}, []

    labelled = windows_from_recordings(synth_recordings(cfg.synth, cfg.seed), cfg.window)
    unlabelled = windows_from_recordings(synth_recordings(cfg.pretrain_synth, cfg.seed + 10_000), cfg.window)
    plan = make_folds(labelled.participants, cfg.seed, cfg.protocol.plan_folds)
    split_sizes = [len(plan.folds[0][k]) for k in ("train", "val", "test")]
    log(f"labelled participants {len(labelled.participants)} (fold sizes {split_sizes}); "
        f"pre-training participants {len(unlabelled.participants)}")

    t0 = time.time()
    state = pretrain_on_windows(unlabelled.pretrain, unlabelled.participants, cfg, log_every=0)
    timings["pretrain_s"] = time.time() - t0
    log(f"pre-training: best epoch {state.epoch}, val loss {state.best_val:.4f} ({timings['pretrain_s']:.0f}s)")

    vq = vq_tokens(state, labelled.evaluation)
    usage = usage_stats([np.array(s.ids) for s in vq])
    metrics["distinct_codewords"] = usage["distinct_codewords"]
    metrics["codeword_entropy_bits"] = round(usage["entropy"], 12)
    metrics["vocab_limit"] = cfg.model.vars ** cfg.model.groups
    top = static_concentration(vq)
    metrics["top_token_share"] = {str(k): v for k, v in top.items()}

    def classify(name, corpus, n_folds, repeats, **kw):
        audit = SplitAccessLog()
        t = time.time()
        report = run_protocol(corpus, plan, cfg.protocol.grid, cfg.classifier, n_folds, repeats, audit=audit, **kw)
        timings[f"classify_{name}_s"] = time.time() - t
        metrics[f"{name}_f1_mean"] = report["test_f1_mean"]
        metrics[f"{name}_f1_std"] = report["test_f1_std"]
        metrics[f"{name}_test_reads_during_selection"] = audit.test_reads_during("select")
        log(f"{name}: macro F1 {report['test_f1_mean']:.3f} ± {report['test_f1_std']:.3f} ({timings[f'classify_{name}_s']:.0f}s)")
        return report

    reports = {
        "vq": classify("vq", vq, cfg.protocol.n_folds, cfg.protocol.repeats),
        "sax": classify("sax", sax_tokens(labelled.evaluation, cfg.sax), cfg.protocol.n_folds, cfg.protocol.repeats),
    }

    # masked LM over tokens of the unlabelled population; vocabulary fixed there
    lm_corpus = vq_tokens(state, unlabelled.evaluation)
    vocab = build_vocab(lm_corpus)
    t = time.time()
    lm_result = pretrain_lm(frame_corpus(lm_corpus, vocab), vocab, cfg.lm)
    timings["lm_pretrain_s"] = time.time() - t
    metrics["lm_masked_accuracy"] = masked_metrics(lm_result.model, frame_corpus(lm_corpus, vocab), cfg.lm)["accuracy"]
    reports["lm_frozen"] = classify(
        "lm_frozen", vq, cfg.protocol.lm_n_folds, cfg.protocol.lm_repeats, embeddings=lm_result.table.weights, vocab=vocab
    )
    reports["lm_learnable"] = classify("lm_learnable", vq, cfg.protocol.lm_n_folds, cfg.protocol.lm_repeats, vocab=vocab)

    periodic = periodic_lm_check(cfg.seed)
    metrics["periodic_lm_accuracy"] = periodic["accuracy"]
    timings["periodic_lm_s"] = periodic["seconds"]

    others = [v for k, v in top.items() if k != 0]
    checks = [
        Check("vq_f1>=0.80", metrics["vq_f1_mean"] >= 0.80, f"{metrics['vq_f1_mean']:.3f}"),
        Check("vq_minus_sax>=0.10", metrics["vq_f1_mean"] - metrics["sax_f1_mean"] >= 0.10,
              f"{metrics['vq_f1_mean']:.3f} - {metrics['sax_f1_mean']:.3f}"),
        Check("pretrain<=600s", timings["pretrain_s"] <= 600, f"{timings['pretrain_s']:.0f}s"),
        Check("classify<=300s", timings["classify_vq_s"] <= 300, f"{timings['classify_vq_s']:.0f}s"),
        Check("distinct_codewords>=8", metrics["distinct_codewords"] >= 8, str(metrics["distinct_codewords"])),
        Check("vocab<=V^G", metrics["distinct_codewords"] <= metrics["vocab_limit"],
              f"{metrics['distinct_codewords']} <= {metrics['vocab_limit']}"),
        Check("static_class_most_concentrated", bool(others) and top.get(0, 0.0) > max(others),
              f"{top.get(0, float('nan')):.3f} vs {max(others) if others else float('nan'):.3f}"),
        Check("periodic_lm_acc>0.9", metrics["periodic_lm_accuracy"] > 0.9, f"{metrics['periodic_lm_accuracy']:.3f}"),
        Check("periodic_lm<=120s", timings["periodic_lm_s"] <= 120, f"{timings['periodic_lm_s']:.0f}s"),
        Check("frozen_lm_f1>=learnable-0.02", metrics["lm_frozen_f1_mean"] >= metrics["lm_learnable_f1_mean"] - 0.02,
              f"{metrics['lm_frozen_f1_mean']:.3f} vs {metrics['lm_learnable_f1_mean']:.3f}"),
        Check("no_test_reads_in_selection",
              all(metrics[f"{n}_test_reads_during_selection"] == 0 for n in ("vq", "sax", "lm_frozen", "lm_learnable")), "audit"),
    ]

    if out:
        save_checkpoint(state, out / "model.ckpt")
        write_corpus(vq, out / "vq_corpus.txt", meta={"kind": "vq"})
        write_usage_csv(usage, out / "usage.csv")
        write_histograms_csv(class_histograms(vq), out / "histograms.csv")
        lm_result.table.save(out / "embeddings.bin")
        plan.save(out / "folds.json")
        artifacts = [out / n for n in ("model.ckpt", "vq_corpus.txt", "usage.csv", "histograms.csv", "embeddings.bin", "folds.json")]
        (out / "reports.json").write_text(json.dumps({k: _strip_runtime(v) for k, v in reports.items()}, indent=2, sort_keys=True))
        artifacts.append(out / "reports.json")
        (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
        (out / "checks.json").write_text(json.dumps([asdict(c) for c in checks], indent=2))
        write_manifest(out / "manifest.json", "repro", cfg, outputs=artifacts, metrics=metrics)
    return {"metrics": metrics, "timings": timings, "checks": checks}


def format_checks(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    rows = [f"{'PASS' if c.passed else 'FAIL'}  {c.name.ljust(width)}  {c.detail}" for c in checks]
    return "\n".join(rows)
