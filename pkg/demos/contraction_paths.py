"""
Contraction paths for a TT layer
================================

A TT linear layer is a small tensor network.  Here the fixed two-sided path
used by the layer is compared with the exhaustive optimum and the greedy
heuristic as the batch grows.
"""

from ttcompress import empirical_tt_plan, exhaustive_search, greedy_search, tt_forward_network
from ttcompress.paths import check_grouped_structure

dims, ranks = (4, 4, 4, 4), (1, 3, 4, 3, 1)
print(f"{'batch':>6} {'optimal':>9} {'empirical':>10} {'greedy':>9}  optimal groups cores first")
for b in (1, 4, 16, 64, 256, 1024):
    spec = tt_forward_network(dims, ranks, b)
    best = exhaustive_search(spec)
    emp = empirical_tt_plan(dims, ranks, b)
    greedy = greedy_search(spec)
    print(f"{b:6d} {best.total_cost:9d} {emp.total_cost:10d} {greedy.total_cost:9d}  {check_grouped_structure(best)}")

###############################################################################
# At a large batch both plans spend nearly all their work on the two
# batch-sized products.

b = 1024
print()
print(empirical_tt_plan(dims, ranks, b).describe())
print()
print(exhaustive_search(tt_forward_network(dims, ranks, b)).describe())
