"""
Training and retrieval
======================

A short two-stage run on a small benchmark. Stage one trains the heads and
the identity classifier; stage two adds the projection and common-space
losses. Captions then query the image gallery of unseen identities.
"""

import tempfile
from pathlib import Path

from c3m.evaluation import evaluate
from c3m.synthgen import GeneratorConfig, generate_dataset, split_dataset
from c3m.training import HyperParams, load_checkpoint, save_checkpoint, train

parts = split_dataset(generate_dataset(GeneratorConfig(identities=30, seed=4)), (0.6, 0.0, 0.4))
hp = HyperParams(p=32, epochs=12, stage2_start=4, seed=4)

state, log = train(parts["train"], hp, "lbul_usem")
for entry in log[::3]:
    print(entry.epoch, "stage", entry.stage, "stage-1 loss %.3f" % entry.parts["stage1"])

result = evaluate(state, parts["test"])
print("rank-k:", result.ranks, "queries", result.query_count, "gallery", result.gallery_size)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.c3mc"
    save_checkpoint(state, path)
    again = evaluate(load_checkpoint(path), parts["test"])
    print("reloaded checkpoint gives the same ranks:", again.ranks == result.ranks)
