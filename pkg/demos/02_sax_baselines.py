"""Symbolic baselines: magnitude SAX and per-channel SAX-REPEAT.

Both discretize a 2 s window into 50 symbols. SAX works on the rotation
invariant acceleration magnitude. SAX-REPEAT symbolises each axis and then
clusters the per-step symbol triples with k-means fit on training data only.
"""
import numpy as np

from vqcpc.datapipe import synth_dataset, window
from vqcpc.sax import SaxConfig, SaxRepeat, breakpoints, sax_discretize

recs = synth_dataset(num_participants=3, classes=4, seed=0, seconds_per_segment=10)
train = [w for r in recs[:2] for w in window(r, 100, 0.0)]
test = [w for r in recs[2:] for w in window(r, 100, 0.0)]

print("Gaussian breakpoints for a 4-letter alphabet:", np.round(breakpoints(4), 4))

cfg = SaxConfig(alphabet_size=8)
seq = sax_discretize(test[0], cfg)
print(f"magnitude SAX of one window ({len(seq.ids)} symbols):", seq.ids[:20], "...")

repeat = SaxRepeat(SaxConfig(alphabet_size=16), k=32, seed=0).fit(train)
tokens = repeat.transform(test)
print(f"SAX-REPEAT with k={repeat.k_effective}: first window", tokens[0].ids[:20], "...")
print("k-means converged in", repeat.result.n_iter, "iterations, inertia", round(repeat.result.inertia, 2))
