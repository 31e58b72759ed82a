"""
Looking, then leaping
=====================

Distribution shifting gives one modality's feature the other's mean and
spread. A small perceptron then projects it, and a sigmoid gate mixes the
projection with the original feature.
"""

import numpy as np

from c3m import numerics as nx
from c3m.manifold import distribution_shift, embed_pair, gate, init_manifold

rng = np.random.default_rng(3)
v_u = rng.normal(0.0, 0.5, size=8)
t_u = rng.normal(2.0, 2.0, size=8)

shifted = distribution_shift(v_u, t_u)
for name, x in (("v_u", v_u), ("t_u", t_u), ("DS(v_u, t_u)", shifted.data)):
    m = nx.moments(x)
    print(f"{name:>14}: mean {m.mean.item():+.3f} std {m.std.item():.3f}")

# affinely related vectors map exactly onto the target
print(distribution_shift([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]).data)

params = init_manifold(rng, 8)
e = embed_pair(v_u, t_u, params)
g = gate(v_u, e.v_p, params.lasm_for(0)).data
print("gate starts near one half:", np.round(g, 2))
print("v_c lies between v_u and v_p:",
      bool(np.all((e.v_c.data >= np.minimum(v_u, e.v_p.data)) & (e.v_c.data <= np.maximum(v_u, e.v_p.data)))))
print("common-space cosine:", round(nx.cosine(e.v_c, e.t_c).item(), 4))
