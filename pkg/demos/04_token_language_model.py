"""Masked-token pre-training over discrete sequences.

First a sanity check on a strictly alternating corpus, where every masked
token is predictable from its neighbours. Then the learned input embeddings
are saved, reloaded and used as a frozen table inside a classifier.
"""
import torch

from vqcpc.classifier import ClassifierConfig, TokenClassifier
from vqcpc.lm import EmbeddingTable, LMConfig, masked_metrics, pretrain_lm
from vqcpc.tokens import TokenSequence, build_vocab, frame_corpus

torch.set_num_threads(1)

corpus = [TokenSequence([0, 1] * 12) for _ in range(64)]
vocab = build_vocab(corpus)
framed = frame_corpus(corpus, vocab)
print("framed sequence:", framed[0].ids[:8], "... (CLS first, SEP last)")

cfg = LMConfig(epochs=15, batch=16, seed=0)
result = pretrain_lm(framed, vocab, cfg)
print(f"loss {result.history[0]['train_loss']:.3f} -> {result.history[-1]['train_loss']:.3f}")
print("masked-token accuracy:", round(masked_metrics(result.model, framed, cfg)["accuracy"], 3))

result.table.save("/tmp/demo_embeddings.bin")
table = EmbeddingTable.load("/tmp/demo_embeddings.bin")
table.check(vocab)
model = TokenClassifier(len(vocab), 2, ClassifierConfig(), embeddings=table.weights)
frozen = model.embed.weight.requires_grad
print(f"embedding table {tuple(table.weights.shape)} loaded; trainable inside classifier: {frozen}")
