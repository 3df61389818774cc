"""Participant-disjoint activity classification from token sequences.

Compares VQ-CPC tokens with magnitude SAX under the same protocol. The grid
is selected on validation F1 only. Test splits are read once, afterwards,
which the split-access log confirms. Takes about six minutes,
most of it pre-training.
"""
import torch

from vqcpc.classifier import ClassifierConfig, SplitAccessLog, run_protocol
from vqcpc.datapipe import make_folds
from vqcpc.pipeline import PipelineConfig, pretrain_on_windows, sax_tokens, synth_recordings, vq_tokens, windows_from_recordings

torch.set_num_threads(1)
cfg = PipelineConfig().seeded(0)

labelled = windows_from_recordings(synth_recordings(cfg.synth, cfg.seed), cfg.window)
unlabelled = windows_from_recordings(synth_recordings(cfg.pretrain_synth, cfg.seed + 10_000), cfg.window)
plan = make_folds(labelled.participants, seed=0, n_folds=5)
print("fold 0:", {k: len(v) for k, v in plan.folds[0].items()}, "participants")

state = pretrain_on_windows(unlabelled.pretrain, unlabelled.participants, cfg, log_every=0)
corpora = {"vq": vq_tokens(state, labelled.evaluation), "sax": sax_tokens(labelled.evaluation, cfg.sax)}

clf = ClassifierConfig(epochs=10, seed=0)
for name, corpus in corpora.items():
    audit = SplitAccessLog()
    report = run_protocol(corpus, plan, {"lr": [1e-3, 5e-4], "l2": [0.0]}, clf, n_folds=2, repeats=1, audit=audit)
    print(f"{name}: selected {report['selected']['params']}, test macro F1 {report['test_f1_mean']:.3f}"
          f" (test reads during selection: {audit.test_reads_during('select')})")
