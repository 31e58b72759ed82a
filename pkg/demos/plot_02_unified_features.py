"""
Heads and unified features
==========================

The trainable heads turn raw columns into a global feature plus local
features. The unified feature adds the locals to the global, weighted by a
softmax of their dot products with the global.
"""

import numpy as np

from c3m.representation import encode, init_heads, usem, usem_variant, usem_weights
from c3m.synthgen import TEXTUAL, GeneratorConfig, generate_dataset

data = generate_dataset(GeneratorConfig(identities=4, seed=1))
heads = init_heads(np.random.default_rng(0), data.meta.d_raw, 8)

caption = data.by_modality(TEXTUAL)[0]
F = encode(caption, heads)
print("columns (global + locals):", F.columns.shape)

w = usem_weights(F).data
print("attention over locals:", np.round(w, 3), "sum", w.sum())

for kind in ("glo", "avg", "avgloc_glo", "usem"):
    print(f"{kind:>10}", np.round(usem_variant(F, kind).data[:4], 3))

# a batch of captions is padded; the mask keeps padding out of the softmax
by_count = {r.m: r for r in data.by_modality(TEXTUAL)}
batch = encode([by_count[m] for m in sorted(by_count)[:3]], heads)
print("mask:\n", batch.mask.astype(int))
print("unified batch:", usem(batch).shape)
