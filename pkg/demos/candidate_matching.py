"""Look inside one matching step on a simulated frame pair.

Shows the candidates the tracker extracts from two consecutive score maps, the
assignment matrix with its dustbin row and column, and the decoded matches
next to the simulator's ground-truth identities.
"""

import numpy as np

from sfmtrack import matcher as mt
from sfmtrack import pipeline
from sfmtrack import tracker as tk
from sfmtrack.matcher import TrainConfig

np.set_printoptions(precision=3, suppress=True)

seqs = pipeline.generate(pipeline.STANDARD_SIM, count=4, seed=1)
params, mcfg, _ = pipeline.train(seqs, omega=0.2, seed=0, train_cfg=TrainConfig(steps=200))

seq = seqs[0]
t = 10
prev = tk.frame_candidates(seq, t - 1, pipeline.STANDARD_TRACKER)
cur = tk.frame_candidates(seq, t, pipeline.STANDARD_TRACKER)
print(f"frame {t - 1}: {len(prev)} candidates, ids {prev.object_ids}")
print(f"frame {t}: {len(cur)} candidates, ids {cur.object_ids}")

# the last row and column are the dustbins: mass there means "no partner"
A, result = mt.match(prev, cur, params, mcfg)
print("assignment matrix:")
print(A.probs)

truth = set(mt.gt_cells(prev.object_ids, cur.object_ids))
for i, j in result.pairs:
    ok = "ok" if (i, j) in truth else "WRONG"
    print(f"  prev {i} (id {prev.object_ids[i]}) -> cur {j} (id {cur.object_ids[j]})  {ok}")
print(f"unmatched in previous frame: {result.unmatched_prev}")
print(f"unmatched in current frame: {result.unmatched_cur}")
