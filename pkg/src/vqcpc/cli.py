"""Command-line entry point: synth | ingest | pretrain | extract | sax | lm | classify | analyze | repro."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .classifier import SplitAccessLog, run_protocol
from .datapipe import FoldPlan, SensorWindow, make_folds, read_csv_dir, windows_to_arrays, write_csv_recording
from .lm import EmbeddingTable, masked_metrics, pretrain_lm
from .pipeline import (
    ConfigError,
    MissingInput,
    fast_config,
    file_sha256,
    format_checks,
    load_config,
    pretrain_on_windows,
    require,
    run_repro,
    sax_repeat_tokens,
    sax_tokens,
    synth_recordings,
    vq_tokens,
    windows_from_recordings,
    write_manifest,
)
from .pretrainer import CheckpointError, load_checkpoint, save_checkpoint
from .quantizer import usage_stats, write_usage_csv
from .tokens import (
    Vocabulary,
    build_vocab,
    class_histograms,
    frame_corpus,
    plot_histograms,
    read_corpus,
    write_corpus,
    write_histograms_csv,
)

logger = logging.getLogger("vqcpc")

WINDOWS_FILE = "windows.npz"
CORPUS_FILE = "corpus.txt"


class StageFailed(RuntimeError):
    """A stage ran but one of its output checks did not hold."""


# --- window store written by `ingest` -------------------------------------


def save_windows(path, pre: list, ev: list) -> None:
    arrays = {}
    for prefix, ws in (("pre", pre), ("eval", ev)):
        x, y, pids = windows_to_arrays(ws)
        arrays[f"{prefix}_x"], arrays[f"{prefix}_y"], arrays[f"{prefix}_pid"] = x, y, np.array(pids)
    np.savez(path, **arrays)


def load_windows(path, which: str) -> list[SensorWindow]:
    with np.load(path) as data:
        x, y, pids = data[f"{which}_x"], data[f"{which}_y"], data[f"{which}_pid"]
    return [SensorWindow(x[i], None if y[i] < 0 else int(y[i]), str(pids[i])) for i in range(len(x))]


def _data_file(data_dir) -> Path:
    return require(Path(data_dir) / WINDOWS_FILE, "window store", "run `ingest --data CSV_DIR --out DIR` first")


def _corpus_file(tokens) -> Path:
    p = Path(tokens)
    p = p / CORPUS_FILE if p.is_dir() or not p.suffix else p
    return require(p, "token corpus", "run `extract` or `sax` first")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --- stages ---------------------------------------------------------------


def cmd_synth(args, cfg):
    out = _out_dir(args.out)
    recs = synth_recordings(cfg.synth, cfg.seed)
    paths = []
    for rec in recs:
        paths.append(out / f"{rec.participant_id}.csv")
        write_csv_recording(rec, paths[-1])
    write_manifest(out / "manifest.json", "synth", cfg, outputs=paths)
    print(f"wrote {len(recs)} recordings to {out}")


def cmd_ingest(args, cfg):
    data = require(args.data, "recording directory", "pass --data DIR with one CSV per participant")
    out = _out_dir(args.out)
    ws = windows_from_recordings(read_csv_dir(data), cfg.window)
    save_windows(out / WINDOWS_FILE, ws.pretrain, ws.evaluation)
    plan = make_folds(ws.participants, cfg.seed, cfg.protocol.plan_folds)
    plan.save(out / "folds.json")
    write_manifest(
        out / "manifest.json", "ingest", cfg,
        inputs={p.name: file_sha256(p) for p in sorted(Path(data).glob("*.csv"))},
        outputs=[out / WINDOWS_FILE, out / "folds.json"],
        metrics={"pretrain_windows": len(ws.pretrain), "eval_windows": len(ws.evaluation), "participants": len(ws.participants)},
    )
    print(f"{len(ws.participants)} participants, {len(ws.pretrain)} pre-training / {len(ws.evaluation)} evaluation windows")


def cmd_pretrain(args, cfg):
    src = _data_file(args.data)
    windows = load_windows(src, "pre")
    participants = sorted({w.participant_id for w in windows})
    state = pretrain_on_windows(windows, participants, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out)
    write_manifest(
        out.with_suffix(".manifest.json"), "pretrain", cfg, inputs={src.name: file_sha256(src)}, outputs=[out],
        metrics={"best_epoch": state.epoch, "best_val_loss": state.best_val, "stopped_epoch": state.stopped_epoch},
    )
    print(f"best epoch {state.epoch} (val loss {state.best_val:.4f}); checkpoint {out}")


def cmd_extract(args, cfg):
    if not args.checkpoint:
        raise MissingInput("extract needs --checkpoint CKPT (produced by `pretrain`)")
    ckpt = require(args.checkpoint, "checkpoint", "run `pretrain` first")
    src = _data_file(args.data)
    state = load_checkpoint(ckpt)
    seqs = vq_tokens(state, load_windows(src, "eval"))
    out = _out_dir(args.out)
    write_corpus(seqs, out / CORPUS_FILE, meta={"kind": "vq", "groups": state.model_config.groups, "vars": state.model_config.vars})
    stats = usage_stats([np.array(s.ids) for s in seqs])
    write_usage_csv(stats, out / "usage.csv")
    limit = state.model_config.vars ** state.model_config.groups
    write_manifest(
        out / "manifest.json", "extract", cfg,
        inputs={ckpt.name: file_sha256(ckpt), src.name: file_sha256(src)},
        outputs=[out / CORPUS_FILE, out / "usage.csv"],
        metrics={"sequences": len(seqs), "distinct_codewords": stats["distinct_codewords"], "entropy_bits": stats["entropy"]},
    )
    print(f"{len(seqs)} sequences, {stats['distinct_codewords']} distinct codewords (limit {limit})")
    if stats["distinct_codewords"] > limit:
        raise StageFailed("realized vocabulary exceeds V^G")


def cmd_sax(args, cfg):
    src = _data_file(args.data)
    windows = load_windows(src, "eval")
    if args.repeat:
        folds = Path(args.folds) if args.folds else Path(args.data) / "folds.json"
        train = set(FoldPlan.load(require(folds, "fold plan", "run `ingest` or pass --folds")).folds[0]["train"])
        seqs = sax_repeat_tokens([w for w in windows if w.participant_id in train], windows, cfg.sax, cfg.sax_repeat_k, cfg.seed)
        kind = "sax-repeat"
    else:
        seqs = sax_tokens(windows, cfg.sax)
        kind = "sax"
    out = _out_dir(args.out)
    write_corpus(seqs, out / CORPUS_FILE, meta={"kind": kind, "alphabet": cfg.sax.alphabet_size})
    write_manifest(out / "manifest.json", kind, cfg, inputs={src.name: file_sha256(src)}, outputs=[out / CORPUS_FILE])
    print(f"{len(seqs)} {kind} sequences written to {out / CORPUS_FILE}")


def cmd_lm(args, cfg):
    corpus_path = _corpus_file(args.tokens)
    corpus, _ = read_corpus(corpus_path)
    vocab = build_vocab(corpus)
    framed = frame_corpus(corpus, vocab)
    result = pretrain_lm(framed, vocab, cfg.lm)
    out = _out_dir(args.out)
    result.table.save(out / "embeddings.bin")
    (out / "vocab.json").write_text(vocab.to_json())
    acc = masked_metrics(result.model, framed, cfg.lm)["accuracy"]
    write_manifest(
        out / "manifest.json", "lm", cfg, inputs={corpus_path.name: file_sha256(corpus_path)},
        outputs=[out / "embeddings.bin", out / "vocab.json"],
        metrics={"vocab_size": len(vocab), "final_loss": result.history[-1]["train_loss"], "masked_accuracy": acc},
    )
    print(f"vocabulary {len(vocab)}, masked accuracy {acc:.3f}; embeddings in {out / 'embeddings.bin'}")


def cmd_classify(args, cfg):
    corpus_path = _corpus_file(args.tokens)
    if not args.folds:
        raise MissingInput("classify needs --folds FILE (written by `ingest`)")
    folds_path = require(args.folds, "fold plan", "pass the folds.json written by `ingest`")
    corpus, _ = read_corpus(corpus_path)
    corpus = [s for s in corpus if s.label is not None]
    grid = json.loads(require(args.grid, "grid file", "pass a JSON grid").read_text()) if args.grid else cfg.protocol.grid
    embeddings = vocab = None
    if args.embeddings:
        emb_path = require(args.embeddings, "embedding table", "run `lm` first")
        table = EmbeddingTable.load(emb_path)
        vocab = Vocabulary.from_json(require(emb_path.parent / "vocab.json", "vocabulary", "keep vocab.json next to the table").read_text())
        table.check(vocab)
        embeddings = table.weights
    audit = SplitAccessLog()
    report = run_protocol(
        corpus, FoldPlan.load(folds_path), grid, cfg.classifier, cfg.protocol.n_folds, cfg.protocol.repeats,
        embeddings=embeddings, vocab=vocab, audit=audit,
    )
    report["test_reads_during_selection"] = audit.test_reads_during("select")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))
    print(f"macro F1 {report['test_f1_mean']:.3f} ± {report['test_f1_std']:.3f}; selected {report['selected']['params']}")
    if report["test_reads_during_selection"]:
        raise StageFailed("test data was read during model selection")


def cmd_analyze(args, cfg):
    corpus_path = _corpus_file(args.tokens)
    corpus, _ = read_corpus(corpus_path)
    out = _out_dir(args.out)
    outputs = []
    metrics = {}
    if args.histograms:
        hists = class_histograms(corpus)
        write_histograms_csv(hists, out / "histograms.csv")
        figs = plot_histograms(hists, out / "figures")
        outputs.append(out / "histograms.csv")
        sums = {str(c): sum(h.values()) for c, h in hists.items()}
        metrics["fraction_sums"] = sums
        metrics["figures"] = [p.name for p in figs]
        print(f"histograms for {len(hists)} classes; {len(figs)} figures in {out / 'figures'}")
        if any(abs(v - 1.0) > 1e-9 for v in sums.values()):
            raise StageFailed("histogram fractions do not sum to 1")
    write_manifest(out / "manifest.json", "analyze", cfg, inputs={corpus_path.name: file_sha256(corpus_path)}, outputs=outputs, metrics=metrics)


def cmd_repro(args, cfg):
    if args.fast:
        base = fast_config(cfg.seed)
        cfg = load_config(args.config or (), {"seed": cfg.seed}, base=base)
    result = run_repro(cfg, args.out, log=lambda msg: print(msg, flush=True))
    print(format_checks(result["checks"]))
    if not all(c.passed for c in result["checks"]):
        raise StageFailed("one or more reproduction checks failed")


COMMANDS = {
    "synth": (cmd_synth, "generate labelled synthetic recordings as CSV", ["out"]),
    "ingest": (cmd_ingest, "window CSV recordings and write a fold plan", ["data", "out"]),
    "pretrain": (cmd_pretrain, "train VQ-CPC and write a checkpoint", ["data", "out"]),
    "extract": (cmd_extract, "tokenize windows with a trained checkpoint", ["data", "out"]),
    "sax": (cmd_sax, "tokenize windows with SAX or SAX-REPEAT", ["data", "out"]),
    "lm": (cmd_lm, "pre-train a masked LM and export its embeddings", ["tokens", "out"]),
    "classify": (cmd_classify, "run the fold protocol on a token corpus", ["tokens", "out"]),
    "analyze": (cmd_analyze, "per-class token histograms", ["tokens", "out"]),
    "repro": (cmd_repro, "run the desk-scale pipeline and print the check table", []),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqcpc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, required) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", action="append", help="TOML/JSON config; repeat to layer several files")
        p.add_argument("--seed", type=int, help="overrides the config seed for every stage")
        p.add_argument("--data", required="data" in required, help="input directory")
        p.add_argument("--out", required="out" in required, help="output path")
        p.add_argument("--checkpoint", help="VQ-CPC checkpoint")
        p.add_argument("--tokens", required="tokens" in required, help="token corpus file or directory")
        p.add_argument("--embeddings", help="frozen embedding table from `lm`")
        p.add_argument("--folds", help="fold plan JSON")
        p.add_argument("--grid", help="JSON hyperparameter grid, e.g. {\"lr\": [1e-3], \"l2\": [0]}")
        if name == "sax":
            p.add_argument("--repeat", action="store_true", help="multichannel SAX-REPEAT instead of magnitude SAX")
        if name == "analyze":
            p.add_argument("--histograms", action="store_true", help="write per-class histogram CSV and figures")
        if name == "repro":
            p.add_argument("--fast", action="store_true", help="small smoke-test scale")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        cfg = load_config(args.config or (), {"seed": args.seed} if args.seed is not None else None)
        COMMANDS[args.command][0](args, cfg)
    except (MissingInput, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
