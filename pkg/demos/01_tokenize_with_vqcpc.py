"""Turn raw accelerometer windows into discrete tokens with VQ-CPC.

Synthesises a small labelled population, pre-trains a VQ-CPC model for a
few epochs, and prints how the learned codebook is used per activity.
Runs in about a minute on one CPU core.
"""
import torch

from vqcpc.datapipe import apply_norm, fit_norm, synth_dataset, window
from vqcpc.pretrainer import ModelConfig, TrainConfig, extract_tokens, pretrain
from vqcpc.quantizer import usage_stats
from vqcpc.tokens import class_histograms

torch.set_num_threads(1)

# Four participants at 50 Hz: three for training, one for validation.
recs = synth_dataset(num_participants=4, classes=4, seed=0)
train = [w for r in recs[:3] for w in window(r, length=100, overlap=0.0)]
val = [w for r in recs[3:] for w in window(r, length=100, overlap=0.0)]
stats = fit_norm(train)
train, val = apply_norm(train, stats), apply_norm(val, stats)
print(f"{len(train)} training windows, {len(val)} validation windows of shape {train[0].values.shape}")

state = pretrain(train, val, TrainConfig(max_epochs=8), ModelConfig(vars=20), log_every=0)
for h in state.history:
    print(f"epoch {h['epoch']:2d}  train {h['train_loss']:.3f}  val {h['val_loss']:.3f}")

# Each window becomes 49 composite codewords (one index per codebook group).
tokens = extract_tokens(state, val)
print("first window, first 8 tokens:", tokens[0].ids[:8])
usage = usage_stats([t.ids for t in tokens])
print(f"distinct codewords {usage['distinct_codewords']} of {20 ** 2}, entropy {usage['entropy']:.2f} bits")

for label, hist in sorted(class_histograms(tokens).items()):
    top = max(hist.values())
    print(f"class {label}: {len(hist)} distinct tokens, most frequent covers {top:.0%}")
