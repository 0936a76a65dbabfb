"""
Popularity and Markov baselines
===============================

GlobalPop ranks by training popularity, SeqPop by popularity inside the
user's own prefix and FOT by first-order transition probability from the
last action. The ``_cate`` rows do the same over categories.
"""

from gatedlongrec.data import generate_synthetic
from gatedlongrec.evaluation import BASELINES, FirstOrderTransitions, GlobalPop, evaluate_baseline, format_table

ds = generate_synthetic(50, 5, 8, 60, 5, 0)

gp = GlobalPop.from_dataset(ds)
print("most popular items", gp.order[:5].tolist())

fot = FirstOrderTransitions.from_dataset(ds, "cate")
print("category transition matrix\n", fot.matrix().round(2))

reports = [evaluate_baseline(name, ds, item_ks=(1, 10)) for name in BASELINES]
print(format_table([r for r in reports if r.item_ranks is not None]))
print()
print(format_table([r for r in reports if r.cate_ranks is not None]))
