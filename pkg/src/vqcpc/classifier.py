"""Recurrent token classifier and participant-fold evaluation protocol."""

from __future__ import annotations

import copy
import itertools
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .tokens import PAD, TokenSequence, Vocabulary, build_vocab, collate, frame_corpus

logger = logging.getLogger(__name__)


class LabelMismatch(UserWarning):
    pass


@dataclass
class ClassifierConfig:
    embedding_dim: int = 128
    rnn: str = "gru"
    hidden: int = 128
    layers: int = 2
    dropout: float = 0.2
    mlp: tuple = (256, 128)
    lr: float = 1e-3
    l2: float = 0.0
    batch: int = 256
    epochs: int = 50
    lr_decay: float = 0.8
    lr_decay_every: int = 10
    seed: int = 0

    def __post_init__(self):
        self.rnn = self.rnn.lower()
        if self.rnn not in ("gru", "lstm"):
            raise ValueError(f"rnn must be 'gru' or 'lstm', got {self.rnn!r}")
        self.mlp = tuple(self.mlp)


# learning rate x L2 grid searched per dataset
DEFAULT_GRID = {"lr": [1e-3, 5e-4, 1e-4], "l2": [0.0, 1e-4, 1e-5]}


def lr_for_epoch(epoch: int, cfg: ClassifierConfig) -> float:
    """Step decay; epochs are 1-indexed."""
    return cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every)


class TokenClassifier(nn.Module):
    """Embedding -> 2-layer GRU/LSTM -> MLP on the last non-PAD hidden state."""

    def __init__(self, vocab_size: int, num_classes: int, cfg: ClassifierConfig, embeddings: Optional[torch.Tensor] = None):
        super().__init__()
        self.cfg = cfg
        if embeddings is not None:
            embeddings = torch.as_tensor(embeddings, dtype=torch.float32)
            if embeddings.shape[0] != vocab_size:
                raise ValueError(f"embedding table has {embeddings.shape[0]} rows, vocabulary has {vocab_size}")
            self.embed = nn.Embedding.from_pretrained(embeddings.clone(), freeze=True, padding_idx=PAD)
        else:
            self.embed = nn.Embedding(vocab_size, cfg.embedding_dim, padding_idx=PAD)
        rnn_cls = nn.GRU if cfg.rnn == "gru" else nn.LSTM
        self.rnn = rnn_cls(
            self.embed.embedding_dim, cfg.hidden, cfg.layers, batch_first=True, dropout=cfg.dropout if cfg.layers > 1 else 0.0
        )
        layers, width = [], cfg.hidden
        for units in cfg.mlp:
            layers += [nn.Linear(width, units), nn.BatchNorm1d(units), nn.ReLU(), nn.Dropout(cfg.dropout)]
            width = units
        layers.append(nn.Linear(width, num_classes))
        self.mlp = nn.Sequential(*layers)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        emb = self.embed(ids)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, h = self.rnn(packed)
        if isinstance(h, tuple):
            h = h[0]
        return self.mlp(h[-1])


# --- metrics --------------------------------------------------------------


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def macro_f1_from_confusion(cm: np.ndarray, classes: Optional[Sequence[int]] = None) -> float:
    """Unweighted mean of per-class F1 over `classes`.

    By default: every class that occurs in the truth or in the predictions.
    """
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    denom = support + predicted
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    if classes is None:
        classes = np.flatnonzero(denom > 0)
    return float(np.mean(f1[list(classes)]))


def macro_f1(y_true, y_pred, num_classes: Optional[int] = None) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    n = num_classes or int(max(y_true.max(), y_pred.max())) + 1
    return macro_f1_from_confusion(confusion_matrix(y_true, y_pred, n))


# --- training -------------------------------------------------------------


@dataclass
class TrainedClassifier:
    model: TokenClassifier
    num_classes: int
    best_val_f1: float
    best_epoch: int
    history: list = field(default_factory=list)


def _tensors(seqs: Sequence[TokenSequence]):
    ids, lengths = collate([s.ids for s in seqs])
    labels = np.array([s.label for s in seqs], dtype=np.int64)
    return torch.from_numpy(ids), torch.from_numpy(lengths), torch.from_numpy(labels)


@torch.no_grad()
def predict_logits(model: TokenClassifier, seqs: Sequence[TokenSequence], batch: int = 512) -> torch.Tensor:
    was = model.training
    model.eval()
    ids, lengths, _ = _tensors(seqs)
    out = torch.cat([model(ids[i : i + batch], lengths[i : i + batch]) for i in range(0, len(ids), batch)])
    model.train(was)
    return out


def evaluate(model, test: Sequence[TokenSequence], num_classes: Optional[int] = None) -> dict:
    """Macro F1 and confusion matrix on framed, labelled sequences."""
    if isinstance(model, TrainedClassifier):
        num_classes = num_classes or model.num_classes
        model = model.model
    y_true = np.array([s.label for s in test])
    y_pred = predict_logits(model, test).argmax(-1).numpy()
    num_classes = num_classes or int(max(y_true.max(), y_pred.max())) + 1
    cm = confusion_matrix(y_true, y_pred, num_classes)
    return {"macro_f1": macro_f1_from_confusion(cm), "confusion": cm.tolist(), "accuracy": float(np.mean(y_true == y_pred))}


def train_classifier(
    train: Sequence[TokenSequence],
    val: Sequence[TokenSequence],
    cfg: ClassifierConfig,
    vocab_size: int,
    num_classes: int,
    embeddings=None,
) -> TrainedClassifier:
    """Adam with L2, step-decayed lr; keeps the weights of the best validation epoch."""
    train_classes = {s.label for s in train}
    if not {s.label for s in val} <= train_classes:
        warnings.warn("validation contains classes absent from training; they will score as errors", LabelMismatch, stacklevel=2)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = TokenClassifier(vocab_size, num_classes, cfg, embeddings)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.l2)
    ids, lengths, labels = _tensors(train)
    best, best_f1, best_epoch, history = None, -1.0, 0, []
    for epoch in range(1, cfg.epochs + 1):
        for g in opt.param_groups:
            g["lr"] = lr_for_epoch(epoch, cfg)
        model.train()
        order = rng.permutation(len(ids))
        total = 0.0
        for i in range(0, len(order), cfg.batch):
            b = order[i : i + cfg.batch]
            if len(b) < 2:  # batch norm needs more than one sample
                continue
            loss = F.cross_entropy(model(ids[b], lengths[b]), labels[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
        val_f1 = evaluate(model, val, num_classes)["macro_f1"] if val else float("nan")
        history.append({"epoch": epoch, "train_loss": total / len(ids), "val_f1": val_f1})
        if val_f1 > best_f1 or best is None:
            best, best_f1, best_epoch = copy.deepcopy(model.state_dict()), val_f1, epoch
    model.load_state_dict(best)
    model.eval()
    return TrainedClassifier(model, num_classes, best_f1, best_epoch, history)


# --- protocol -------------------------------------------------------------


def expand_grid(grid: dict) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


class SplitAccessLog:
    """Records which split is read during which protocol phase."""

    def __init__(self):
        self.events: list[tuple[str, int, str]] = []
        self.phase = "setup"

    def record(self, fold: int, split: str) -> None:
        self.events.append((self.phase, fold, split))

    def test_reads_during(self, phase: str) -> int:
        return sum(1 for p, _, s in self.events if p == phase and s == "test")


def run_protocol(
    corpus: Sequence[TokenSequence],
    fold_plan,
    grid: Optional[dict] = None,
    base_cfg: Optional[ClassifierConfig] = None,
    n_folds: int = 2,
    repeats: int = 2,
    embeddings=None,
    vocab: Optional[Vocabulary] = None,
    audit: Optional[SplitAccessLog] = None,
) -> dict:
    """Grid search on mean validation F1 over folds, then test F1 of the winner.

    `corpus` holds raw-symbol sequences for every participant. Without a fixed
    `vocab` (needed with frozen embeddings) each fold indexes its own train split.
    """
    t0 = time.time()
    base_cfg = base_cfg or ClassifierConfig()
    grid = grid or {"lr": [base_cfg.lr], "l2": [base_cfg.l2]}
    audit = audit or SplitAccessLog()
    folds = fold_plan.folds if hasattr(fold_plan, "folds") else fold_plan["folds"]
    folds = folds[:n_folds]
    num_classes = int(max(s.label for s in corpus)) + 1

    def split(fold_i: int, name: str) -> list[TokenSequence]:
        audit.record(fold_i, name)
        members = set(folds[fold_i][name])
        return [s for s in corpus if s.participant_id in members]

    def fold_data(fold_i: int, with_test: bool):
        train_raw, val_raw = split(fold_i, "train"), split(fold_i, "val")
        v = vocab or build_vocab(train_raw)
        test = frame_corpus(split(fold_i, "test"), v) if with_test else None
        return frame_corpus(train_raw, v), frame_corpus(val_raw, v), test, len(v)

    points = expand_grid(grid)
    audit.phase = "select"
    selection = []
    cache = {}
    for gi, point in enumerate(points):
        cfg = replace(base_cfg, **point)
        val_scores = []
        for fi in range(len(folds)):
            train, val, _, vsize = fold_data(fi, with_test=False)
            trained = train_classifier(train, val, cfg, vsize, num_classes, embeddings)
            cache[(gi, fi)] = trained
            val_scores.append(trained.best_val_f1)
        selection.append({"params": point, "val_f1_per_fold": val_scores, "mean_val_f1": float(np.mean(val_scores))})
    # strict > keeps the first grid point on ties
    best_i = 0
    for i, entry in enumerate(selection):
        if entry["mean_val_f1"] > selection[best_i]["mean_val_f1"]:
            best_i = i
    best_cfg = replace(base_cfg, **points[best_i])

    audit.phase = "report"
    runs = []
    for fi in range(len(folds)):
        train, val, test, vsize = fold_data(fi, with_test=True)
        for r in range(repeats):
            trained = cache[(best_i, fi)] if r == 0 else train_classifier(
                train, val, replace(best_cfg, seed=base_cfg.seed + 1000 * r), vsize, num_classes, embeddings
            )
            res = evaluate(trained, test, num_classes)
            runs.append({"fold": fi, "repeat": r, "test_f1": res["macro_f1"], "val_f1": trained.best_val_f1, "confusion": res["confusion"]})
    test_f1 = [r["test_f1"] for r in runs]
    return {
        "grid": selection,
        "selected": {"index": best_i, "params": points[best_i]},
        "runs": runs,
        "test_f1_mean": float(np.mean(test_f1)),
        "test_f1_std": float(np.std(test_f1)),
        "config": asdict(best_cfg),
        "n_folds": len(folds),
        "repeats": repeats,
        "runtime_s": time.time() - t0,
    }
