import math

import numpy as np
import pytest
import torch

from vqcpc.lm import (
    IGNORE,
    EmbeddingTable,
    LMConfig,
    MaskedLM,
    VocabMismatch,
    mask_batch,
    masked_loss,
    masked_metrics,
    pretrain_lm,
)
from vqcpc.tokens import END, PAD, START, TokenSequence, build_vocab, collate, frame_corpus


def framed_ids(n=50, length=30, vocab_symbols=20, seed=0):
    rng = np.random.default_rng(seed)
    corpus = [TokenSequence([int(s) for s in rng.integers(0, vocab_symbols, length)]) for _ in range(n)]
    vocab = build_vocab(corpus)
    framed = frame_corpus(corpus, vocab)
    return vocab, framed, collate([s.ids for s in framed])[0]


def test_sizes():
    assert (LMConfig("small").embed, LMConfig("small").ff, LMConfig("small").layers, LMConfig("small").heads) == (128, 512, 2, 8)
    assert (LMConfig("medium").embed, LMConfig("medium").layers) == (256, 4)
    with pytest.raises(ValueError):
        LMConfig(embed=30, heads=4)
    with pytest.raises(ValueError):
        LMConfig(size="huge")


class TestMasking:
    def test_prob_zero(self):
        vocab, _, ids = framed_ids()
        _, targets, sel = mask_batch(ids, LMConfig(mask_prob=0.0), len(vocab), np.random.default_rng(0))
        assert not sel.any() and np.all(targets == IGNORE)

    def test_prob_one_all_mask(self):
        vocab, _, ids = framed_ids()
        cfg = LMConfig(mask_prob=1.0, mask_token_frac=1.0, random_token_frac=0.0)
        inputs, targets, sel = mask_batch(ids, cfg, len(vocab), np.random.default_rng(0))
        maskable = ~np.isin(ids, (PAD, START, END))
        np.testing.assert_array_equal(sel, maskable)
        assert np.all(inputs[maskable] == len(vocab))
        np.testing.assert_array_equal(inputs[~maskable], ids[~maskable])
        np.testing.assert_array_equal(targets[maskable], ids[maskable])

    def test_fraction_binomial(self):
        vocab, _, ids = framed_ids(n=400, length=30)  # 12k maskable positions
        _, _, sel = mask_batch(ids, LMConfig(), len(vocab), np.random.default_rng(1))
        maskable = ~np.isin(ids, (PAD, START, END))
        assert maskable.sum() >= 10_000
        assert abs(sel[maskable].mean() - 0.15) <= 0.01

    def test_reserved_never_targets(self):
        vocab, _, ids = framed_ids()
        _, targets, _ = mask_batch(ids, LMConfig(mask_prob=0.9), len(vocab), np.random.default_rng(2))
        assert not np.isin(targets, (PAD, START, END)).any()

    def test_policy_split(self):
        vocab, _, ids = framed_ids(n=400)
        inputs, _, sel = mask_batch(ids, LMConfig(mask_prob=1.0), len(vocab), np.random.default_rng(3))
        masked = (inputs == len(vocab)) & sel
        unchanged = (inputs == ids) & sel
        assert abs(masked.sum() / sel.sum() - 0.8) < 0.01
        # unchanged = 10% kept + random draws that hit the original symbol
        assert abs(unchanged.sum() / sel.sum() - (0.1 + 0.1 / 20)) < 0.01


def test_untrained_loss_near_uniform():
    vocab, framed, ids = framed_ids()
    torch.manual_seed(0)
    model = MaskedLM(len(vocab), LMConfig()).eval()
    loss = masked_metrics(model, framed, LMConfig())["loss"]
    assert loss == pytest.approx(math.log(len(vocab)), rel=0.05)


def test_zero_grad_at_ignored_positions():
    logits = torch.randn(2, 5, 7, requires_grad=True)
    targets = torch.full((2, 5), IGNORE)
    targets[0, 1], targets[1, 3] = 4, 2
    masked_loss(logits, targets).backward()
    ignored = targets == IGNORE
    assert torch.count_nonzero(logits.grad[ignored]) == 0
    assert torch.count_nonzero(logits.grad[~ignored]) > 0


def test_abab_pattern_learned():
    corpus = [TokenSequence([0, 1] * 12) for _ in range(64)]
    vocab = build_vocab(corpus)
    framed = frame_corpus(corpus, vocab)
    cfg = LMConfig(epochs=15, batch=16)
    result = pretrain_lm(framed, vocab, cfg)
    assert masked_metrics(result.model, framed, cfg)["accuracy"] > 0.9
    assert result.history[-1]["train_loss"] < math.log(len(vocab)) / 2


def test_embedding_table_roundtrip(tmp_path):
    vocab, framed, _ = framed_ids(n=10)
    result = pretrain_lm(framed, vocab, LMConfig(epochs=1))
    table = result.table
    assert table.weights.shape == (len(vocab), 32)
    table.save(tmp_path / "emb.bin")
    back = EmbeddingTable.load(tmp_path / "emb.bin")
    assert back.weights.tobytes() == table.weights.tobytes()
    assert back.vocab_hash == vocab.digest()
    back.check(vocab)


def test_vocab_mismatch():
    vocab, framed, _ = framed_ids(n=10)
    other = build_vocab([TokenSequence([500, 501])])
    table = pretrain_lm(framed, vocab, LMConfig(epochs=1)).table
    with pytest.raises(VocabMismatch):
        table.check(other)
    with pytest.raises(VocabMismatch):
        pretrain_lm(framed, other, LMConfig(epochs=1))
