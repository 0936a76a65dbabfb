"""
A corpus with a planted long-range rule
=======================================

Categories advance in a cycle. Each item is a fixed permutation of the
last item of the same category seen more than ``M`` steps earlier, so the
next item can only be read off the distant history.
"""

import numpy as np

from gatedlongrec.data import generate_synthetic, make_examples, planted_permutations, window

M, T = 4, 3
ds = generate_synthetic(num_users=3, num_cates=3, items_per_cate=4, seq_len=16, M=M, rng=0)
print(ds.stats())

seq = ds.sequences[0]
print("categories:", [a.category for a in seq])
print("items:     ", [a.item for a in seq])

# recent = last M actions, distant = older ones grouped by category (latest T each)
recent, distant = window(seq, 10, M, T)
print("recent items", [a.item for a in recent])
for c, acts in sorted(distant.items()):
    print(f"  distant category {c}: {[a.item for a in acts]}")

# the permutation that produced the target
perm = planted_permutations(ds)
target = seq[10]
source = distant[target.category][-1]
print("target", target.item, "= perm[category][source]", perm[target.category][source.item])

ex = make_examples(ds, "train", M, T)
print(len(ex), "training examples; first one targets item", ex[0].target_item)
