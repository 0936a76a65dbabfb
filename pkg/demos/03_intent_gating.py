"""
Intent, gating and the mixture over categories
==============================================

A GRU over recent categories gives an intent vector. It scores the
categories present in the distant history; the top ``k`` are kept and their
softmax weights renormalised. Each kept category gets its own long-term
summary and its own item distribution, and the weights mix them.
"""

import numpy as np

from gatedlongrec.data import generate_synthetic, make_examples
from gatedlongrec.model import HyperParams, ModelParams, forward, gate_top_k

hyper = HyperParams(M=4, T=3, k=2, Z=8, dropout=0.0, d_e=8, d_c=4, d_s=8, d_l=8)
ds = generate_synthetic(4, 4, 5, 30, hyper.M, 1)
params = ModelParams.init(hyper, ds.num_items, ds.num_cates, np.random.default_rng(0))

ex = make_examples(ds, "test", hyper.M, hyper.T)[0]
out = forward(params, hyper, ex)
print("category distribution", out.cate_dist.round(3))
for cate, weight, cond in out.gated:
    print(f"gate category {cate}: weight {weight:.3f}, best item {int(cond.argmax())}")
print("mixed distribution sums to", out.mixed_dist.sum())

# the same gating on hand-made numbers: alpha (0.6, 0.3, 0.1) keeps 2/3 and 1/3
E = np.log([[0.6, 0.3, 0.1]])
print(gate_top_k(np.array([1.0]), E, [0, 1, 2], k=2))

# no distant categories at all: a single sentinel slot with weight 1
print(gate_top_k(np.array([1.0]), E, [], k=2))
