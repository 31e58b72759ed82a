"""
Fine-grained similarity
=======================

One modality's global feature attends over the other's locals. Only locals
whose weight beats one over the local count survive; if none does, all of
them are kept.
"""

import math

import numpy as np

from c3m.similarity import cross_modal_attention, overall_similarity, sim_fine

y = np.array([1.0, 0.0, 0.0])
locals_ = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
x_f, w = cross_modal_attention(y, locals_, gamma=0.5)
print("weights", np.round(w.weights, 4), "expected", round(math.e / (math.e + 1), 4))
print("selected", w.selected_indices, "x_f", x_f.data)

# identical locals: every weight equals the threshold, so the fallback keeps all
x_f, w = cross_modal_attention(y, np.tile([0.5, 0.5, 0.0], (4, 1)))
print("fallback", bool(w.fallback), x_f.data)

rng = np.random.default_rng(0)
v_g, t_g = rng.normal(size=6), rng.normal(size=6)
s_f = sim_fine(v_g, t_g, rng.normal(size=(6, 6)), rng.normal(size=(4, 6))).item()
print(overall_similarity(0.5, 0.25, s_f))
