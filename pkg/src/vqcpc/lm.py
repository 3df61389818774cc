"""Masked-token language model over symbol corpora and frozen embedding export."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tokens import END, PAD, RESERVED, START, TokenSequence, Vocabulary, collate

logger = logging.getLogger(__name__)

IGNORE = -100
EMBEDDING_MAGIC = b"VQCPCEMB"
EMBEDDING_VERSION = 1
NEVER_MASKED = (PAD, START, END)


class VocabMismatch(ValueError):
    pass


SIZES = {
    "tiny": dict(embed=32, ff=64, layers=1, heads=2),
    "small": dict(embed=128, ff=512, layers=2, heads=8),
    "medium": dict(embed=256, ff=1024, layers=4, heads=8),
}


@dataclass
class LMConfig:
    size: str = "tiny"
    embed: Optional[int] = None
    ff: Optional[int] = None
    layers: Optional[int] = None
    heads: Optional[int] = None
    dropout: float = 0.1
    mask_prob: float = 0.15
    mask_token_frac: float = 0.8
    random_token_frac: float = 0.1
    max_len: int = 64
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.size not in SIZES:
            raise ValueError(f"unknown LM size {self.size!r}")
        for key, val in SIZES[self.size].items():
            if getattr(self, key) is None:
                setattr(self, key, val)
        if self.embed % self.heads:
            raise ValueError("embed must be divisible by heads")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if self.mask_token_frac + self.random_token_frac > 1.0:
            raise ValueError("mask and random-token fractions exceed 1")


def mask_batch(ids, cfg: LMConfig, vocab_size: int, rng: np.random.Generator):
    """Select maskable positions with prob cfg.mask_prob and corrupt them.

    Selected positions become MASK / a random symbol / stay unchanged in the
    configured proportions. MASK has id `vocab_size`. Returns
    (inputs, targets, selected) with targets = IGNORE off the selection.
    """
    ids = np.asarray(ids, dtype=np.int64)
    maskable = ~np.isin(ids, NEVER_MASKED)
    selected = maskable & (rng.random(ids.shape) < cfg.mask_prob)
    targets = np.where(selected, ids, IGNORE)
    inputs = ids.copy()
    action = rng.random(ids.shape)
    to_mask = selected & (action < cfg.mask_token_frac)
    to_random = selected & (action >= cfg.mask_token_frac) & (action < cfg.mask_token_frac + cfg.random_token_frac)
    inputs[to_mask] = vocab_size
    n_symbols = vocab_size - len(RESERVED)
    if n_symbols > 0:
        inputs[to_random] = len(RESERVED) + rng.integers(0, n_symbols, size=int(to_random.sum()))
    return inputs, targets, selected


class MaskedLM(nn.Module):
    """Transformer encoder with learned positions and a tied output projection."""

    def __init__(self, vocab_size: int, cfg: LMConfig):
        super().__init__()
        self.vocab_size = vocab_size
        self.cfg = cfg
        self.tok = nn.Embedding(vocab_size + 1, cfg.embed, padding_idx=PAD)  # last row = MASK
        self.pos = nn.Embedding(cfg.max_len, cfg.embed)
        nn.init.normal_(self.tok.weight, std=0.02)
        nn.init.normal_(self.pos.weight, std=0.02)
        with torch.no_grad():
            self.tok.weight[PAD].zero_()
        self.norm_in = nn.LayerNorm(cfg.embed)
        layer = nn.TransformerEncoderLayer(cfg.embed, cfg.heads, cfg.ff, cfg.dropout, activation="gelu", batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm_out = nn.LayerNorm(cfg.embed)
        self.out_bias = nn.Parameter(torch.zeros(vocab_size + 1))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        positions = torch.arange(ids.shape[1], device=ids.device)
        h = self.norm_in(self.tok(ids) + self.pos(positions))
        h = self.encoder(h, src_key_padding_mask=ids == PAD)
        return self.norm_out(h) @ self.tok.weight.T + self.out_bias

    def input_embeddings(self) -> np.ndarray:
        """Token embedding rows for the vocabulary (MASK row excluded)."""
        return self.tok.weight[: self.vocab_size].detach().cpu().numpy().astype(np.float32)


def masked_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE)


@dataclass
class EmbeddingTable:
    weights: np.ndarray  # (vocab_size, dim) float32
    vocab_hash: str

    def save(self, path) -> None:
        w = np.ascontiguousarray(self.weights, dtype="<f4")
        digest = self.vocab_hash.encode().ljust(16, b"\0")[:16]
        with Path(path).open("wb") as fh:
            fh.write(EMBEDDING_MAGIC)
            fh.write(struct.pack("<I16sII", EMBEDDING_VERSION, digest, w.shape[0], w.shape[1]))
            fh.write(w.tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        data = Path(path).read_bytes()
        if not data.startswith(EMBEDDING_MAGIC):
            raise ValueError(f"{path} is not an embedding table")
        off = len(EMBEDDING_MAGIC)
        version, digest, rows, dims = struct.unpack_from("<I16sII", data, off)
        if version != EMBEDDING_VERSION:
            raise ValueError(f"{path}: embedding table version {version} unsupported")
        off += struct.calcsize("<I16sII")
        w = np.frombuffer(data[off : off + 4 * rows * dims], dtype="<f4").reshape(rows, dims).astype(np.float32)
        return cls(w, digest.rstrip(b"\0").decode())

    def check(self, vocab: Vocabulary) -> None:
        if self.vocab_hash != vocab.digest() or self.weights.shape[0] != len(vocab):
            raise VocabMismatch("embedding table was built for a different vocabulary")


@dataclass
class LMResult:
    table: EmbeddingTable
    model: MaskedLM
    history: list = field(default_factory=list)


@torch.no_grad()
def masked_metrics(model: MaskedLM, framed: Sequence[TokenSequence], cfg: LMConfig, seed: int = 1234) -> dict:
    """Masked-token loss and accuracy with a fixed masking draw."""
    was = model.training
    model.eval()
    ids, _ = collate([s.ids for s in framed])
    inputs, targets, _ = mask_batch(ids, cfg, model.vocab_size, np.random.default_rng(seed))
    logits = model(torch.from_numpy(inputs))
    t = torch.from_numpy(targets)
    sel = t != IGNORE
    model.train(was)
    if not sel.any():
        return {"loss": float("nan"), "accuracy": float("nan")}
    return {
        "loss": masked_loss(logits, t).item(),
        "accuracy": (logits.argmax(-1)[sel] == t[sel]).float().mean().item(),
    }


def pretrain_lm(framed: Sequence[TokenSequence], vocab: Vocabulary, cfg: LMConfig = None) -> LMResult:
    """Masked-token pre-training on framed sequences indexed with `vocab`."""
    cfg = cfg or LMConfig()
    ids, _ = collate([s.ids for s in framed])
    if ids.size and ids.max() >= len(vocab):
        raise VocabMismatch(f"corpus id {ids.max()} outside vocabulary of {len(vocab)}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = MaskedLM(len(vocab), cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.01)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(ids))
        total, n = 0.0, 0
        for i in range(0, len(order), cfg.batch):
            inputs, targets, sel = mask_batch(ids[order[i : i + cfg.batch]], cfg, len(vocab), rng)
            if not sel.any():
                continue
            loss = masked_loss(model(torch.from_numpy(inputs)), torch.from_numpy(targets))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            n += 1
        history.append({"epoch": epoch, "train_loss": total / max(n, 1)})
        logger.debug("lm epoch %d loss %.4f", epoch, history[-1]["train_loss"])
    model.eval()
    return LMResult(EmbeddingTable(model.input_embeddings(), vocab.digest()), model, history)
