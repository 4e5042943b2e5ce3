"""Where does the prior map send the search window after a jump?

Renders a short sequence whose target teleports 120 px to the right, fits
the shallow-cue prior on frame 1, and asks it for a search center on the
frame after the jump.
"""
import numpy as np

from sdtrack.core import TrackerConfig
from sdtrack.harness import SyntheticSpec, synthesize
from sdtrack.prior import PriorModel

spec = SyntheticSpec(n_frames=12, start=(100, 120), teleport_frame=10, teleport_offset=(120, 0))
ds = synthesize(spec)
cfg = TrackerConfig()

model = PriorModel.fit(ds.frame(0), ds.gt[0], cfg)
w = model.weights.w
print("largest prior weights:", np.round(np.sort(np.abs(w))[::-1][:5], 3))

for k in (9, 10):  # 1-based frames just before and at the jump
    decision, smap, cands = model.analyse(ds.frame(k - 1), ds.gt[k - 2])
    g = ds.gt[k - 1]
    cx, cy = decision.center
    print(f"frame {k}: {len(cands)} candidate(s), scores {np.round(decision.scores, 3).tolist()}, "
          f"prior used: {decision.used_prior}, center ({cx:.0f}, {cy:.0f}) vs truth ({g.cx:.0f}, {g.cy:.0f})")
