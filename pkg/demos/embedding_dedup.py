"""
Deduplicated TTM lookups
========================

A batch of ids with many repeats only needs each distinct id's row once.
Counting multiply-adds shows the saving against the row-by-row path.
"""

import numpy as np

from ttcompress import TTMEmbedding, count_flops
from ttcompress.tt import ttm_to_matrix

emb = TTMEmbedding((10, 10, 10), (2, 2, 4), 3, seed=0)
table = ttm_to_matrix(emb.table)
rng = np.random.default_rng(0)
print("table", table.shape, "stored as", emb.table.ranks, "cores:",
      sum(c.size for c in emb.table.cores), "numbers")

for distinct in (100, 50, 10, 1):
    ids = rng.choice(rng.choice(1000, distinct, replace=False), 100)
    with count_flops() as fast:
        rows = emb.lookup(ids)
    with count_flops() as slow:
        emb.lookup_naive(ids)
    err = np.max(np.abs(rows - table[ids]))
    print(f"{len(np.unique(ids)):3d} distinct of 100: dedup {fast.total:6d}  naive {slow.total:6d}"
          f"  saving {slow.total / fast.total:5.1f}x  max err {err:.1e}")
