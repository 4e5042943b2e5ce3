"""The positive-sample pool: temporal weights and who gets picked.

The temporal weight is 1 for the first and latest frames and dips to theta in
the middle, so early and recent samples are favoured over mid-term ones.
"""
import numpy as np

from sdtrack.update import PoolEntry, PositiveSamplePool, selection_distribution, temporal_weight

t = 100
for T in (1, 10, 25, 50, 75, 90, 100):
    print(f"W({T:3d}; t={t}) = {temporal_weight(T, t, 0.7):.3f}")

rng = np.random.default_rng(1)
pool = PositiveSamplePool(capacity=10, insert_ratio=0.85)
z = np.zeros((46, 46))
for frame in range(1, t + 1):
    conf = float(np.clip(0.35 + 0.05 * rng.normal() - 0.001 * frame, 0.01, None))
    pool.try_insert(PoolEntry(frame, z[None], z, z > 0, conf))

p = selection_distribution(pool, t)
print("\nframe  conf   P(select)")
for e, pe in sorted(zip(pool.entries, p), key=lambda x: x[0].frame):
    print(f"{e.frame:5d}  {e.confidence:.3f}  {pe:.3f}")
