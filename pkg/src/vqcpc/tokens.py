"""Vocabulary, framing and corpus I/O for discrete token streams.

A raw symbol is hashable: a G-tuple of codebook indices for VQ tokens, an
int for SAX tokens. The vocabulary maps symbols to integer ids after the
reserved PAD/UNK/START/END ids.
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Optional, Sequence

import numpy as np

PAD, UNK, START, END = 0, 1, 2, 3
RESERVED = {"<PAD>": PAD, "<UNK>": UNK, "<START>": START, "<END>": END}
CORPUS_MAGIC = "# vqcpc-corpus v1"


class EmptyCorpus(ValueError):
    pass


@dataclass
class TokenSequence:
    ids: list
    label: Optional[int] = None
    participant_id: str = ""


def symbol_to_str(sym: Hashable) -> str:
    if isinstance(sym, tuple):
        return "-".join(str(int(v)) for v in sym)
    return str(int(sym))


def str_to_symbol(text: str) -> Hashable:
    if "-" in text:
        return tuple(int(v) for v in text.split("-"))
    return int(text)


@dataclass
class Vocabulary:
    symbols: list = field(default_factory=list)  # index i -> id i + len(RESERVED)

    def __post_init__(self):
        self._lookup = {s: i + len(RESERVED) for i, s in enumerate(self.symbols)}
        if len(self._lookup) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    def __len__(self) -> int:
        return len(RESERVED) + len(self.symbols)

    @property
    def size(self) -> int:
        return len(self)

    def encode(self, sym: Hashable) -> int:
        return self._lookup.get(sym, UNK)

    def decode(self, idx: int) -> Hashable:
        if idx < len(RESERVED):
            return next(k for k, v in RESERVED.items() if v == idx)
        return self.symbols[idx - len(RESERVED)]

    def digest(self) -> str:
        text = "\n".join(symbol_to_str(s) for s in self.symbols)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps({"symbols": [symbol_to_str(s) for s in self.symbols]})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls([str_to_symbol(s) for s in json.loads(text)["symbols"]])


def build_vocab(corpus: Iterable[TokenSequence]) -> Vocabulary:
    """Ids in first-occurrence order, after the four reserved ids."""
    seen = {}
    n_seq = 0
    for seq in corpus:
        n_seq += 1
        for sym in seq.ids:
            seen.setdefault(sym, None)
    if n_seq == 0:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    return Vocabulary(list(seen))


def frame(seq: TokenSequence, vocab: Vocabulary) -> TokenSequence:
    ids = [START] + [vocab.encode(s) for s in seq.ids] + [END]
    return TokenSequence(ids, seq.label, seq.participant_id)


def collate(seqs: Sequence[Sequence[int]], pad_to: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists with PAD. Returns (ids (N, L), lengths (N,))."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    L = max(int(lengths.max()) if len(seqs) else 0, pad_to or 0)
    out = np.full((len(seqs), L), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def frame_corpus(corpus: Sequence[TokenSequence], vocab: Vocabulary) -> list[TokenSequence]:
    return [frame(s, vocab) for s in corpus]


# --- corpus file ----------------------------------------------------------


def write_corpus(corpus: Sequence[TokenSequence], path, meta: Optional[dict] = None) -> None:
    """Plain text: a magic line, optional JSON meta, then per window one
    ``# participant=... label=...`` line followed by the space-separated symbols."""
    lines = [CORPUS_MAGIC]
    if meta:
        lines.append("# meta " + json.dumps(meta, sort_keys=True))
    for seq in corpus:
        label = "" if seq.label is None else str(int(seq.label))
        lines.append(f"# participant={seq.participant_id} label={label}")
        lines.append(" ".join(symbol_to_str(s) for s in seq.ids))
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus(path) -> tuple[list[TokenSequence], dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CORPUS_MAGIC:
        raise ValueError(f"{path}: not a token corpus (expected {CORPUS_MAGIC!r})")
    meta, corpus, pending = {}, [], None
    for line in lines[1:]:
        if line.startswith("# meta "):
            meta = json.loads(line[len("# meta ") :])
        elif line.startswith("# participant="):
            fields = dict(kv.split("=", 1) for kv in line[2:].split())
            pending = (fields.get("participant", ""), int(fields["label"]) if fields.get("label") else None)
        else:
            if pending is None:
                raise ValueError(f"{path}: token line without a header")
            ids = [str_to_symbol(t) for t in line.split()]
            corpus.append(TokenSequence(ids, pending[1], pending[0]))
            pending = None
    return corpus, meta


# --- analytics ------------------------------------------------------------


def class_histograms(corpus: Iterable[TokenSequence]) -> dict:
    """Per class, the fraction of all occurrences taken by each raw symbol."""
    counts = defaultdict(Counter)
    for seq in corpus:
        if seq.label is None:
            continue
        counts[seq.label].update(seq.ids)
    out = {}
    for label in sorted(counts):
        total = sum(counts[label].values())
        out[label] = {sym: c / total for sym, c in counts[label].most_common()}
    return out


def write_histograms_csv(hists: dict, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "token", "fraction"])
        for label, h in hists.items():
            for sym, frac in h.items():
                w.writerow([label, symbol_to_str(sym), repr(frac)])


def plot_histograms(hists: dict, out_dir, top: int = 40) -> list[Path]:
    """One bar chart per class over a shared token ordering; returns file paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    overall = Counter()
    for h in hists.values():
        overall.update(h)
    order = [s for s, _ in overall.most_common(top)]
    paths = []
    for label, h in hists.items():
        fig, ax = plt.subplots(figsize=(8, 2.5))
        ax.bar(range(len(order)), [h.get(s, 0.0) for s in order], color="tab:blue")
        ax.set_xticks(range(len(order)))
        ax.set_xticklabels([symbol_to_str(s) for s in order], rotation=90, fontsize=6)
        ax.set_ylabel("fraction of occurrences")
        ax.set_title(f"class {label}")
        fig.tight_layout()
        p = out_dir / f"hist_class{label}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths
