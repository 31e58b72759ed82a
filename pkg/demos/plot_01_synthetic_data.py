"""
Synthetic backbone outputs
==========================

Each identity owns a latent vector. Images and captions see it through
different random maps and a different per-coordinate distortion, so the
two modalities disagree on location and spread.
"""

import numpy as np

from c3m.synthgen import TEXTUAL, VISUAL, GeneratorConfig, generate_dataset, split_dataset

cfg = GeneratorConfig(identities=20, seed=0)
data = generate_dataset(cfg)
print(data.meta)

# column 0 of every raw matrix is the global feature
v = np.array([r.raw[:, 0] for r in data.by_modality(VISUAL)], dtype=float)
t = np.array([r.raw[:, 0] for r in data.by_modality(TEXTUAL)], dtype=float)
print("visual  globals: mean %.2f std %.2f" % (v.mean(), v.std()))
print("textual globals: mean %.2f std %.2f" % (t.mean(), t.std()))

# captions carry a variable number of phrases, images always k parts
print("caption local counts:", sorted({r.m for r in data.by_modality(TEXTUAL)}))
print("image local count:", {r.m for r in data.by_modality(VISUAL)})

# same identity, different modality: raw cosine is only a weak signal
vn = v / np.linalg.norm(v, axis=1, keepdims=True)
tn = t / np.linalg.norm(t, axis=1, keepdims=True)
cos = tn @ vn.T
same = np.array([[a.identity == b.identity for b in data.by_modality(VISUAL)] for a in data.by_modality(TEXTUAL)])
print("raw cosine, same identity %.3f vs different %.3f" % (cos[same].mean(), cos[~same].mean()))

# identity-disjoint splits
parts = split_dataset(data, (0.6, 0.2, 0.2))
for name, part in parts.items():
    print(name, part.identities())
