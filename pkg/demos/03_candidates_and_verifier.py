# # From an attention map to one click
#
# The top patches are pooled, grouped into 4-connected clusters, and each
# cluster adds a weighted center. A verifier then walks the list in order and
# stops at the first point it trusts.

# %%

from patch_actor import OracleScorer, SelectionConfig, build_candidates, gen_dataset, predict, select
from patch_actor.verifier import ScoringContext, self_aggregate_score

from pathlib import Path

from patch_actor.actionhead import load

# the model saved by 02_train_action_head.py
MODEL = Path(__file__).with_name("out") / "model.json"
if not MODEL.exists():
    raise SystemExit("run 02_train_action_head.py first")
model = load(MODEL)

records = gen_dataset(seed=3, n_screens=20, n_elements=6, adjacent=True, noise_scale=0.15)
rec = records[-1]

cands = build_candidates(predict(model, rec), SelectionConfig())
for c in cands.candidates[:5]:
    print(f"({c.x:6.1f}, {c.y:6.1f})  w={c.weight:.3f}  {c.source}")
print("clusters:", [len(c) for c in cands.clusters])

# A perfect oracle says 1 inside the target box and 0 elsewhere. With gamma
# 0.95 the walk stops at the first hit.

# %%

ctx = ScoringContext(rec)
res = select(cands, OracleScorer(), ctx, SelectionConfig(gamma=0.95))
print("chosen", res.chosen.point, "after", res.evaluated_count, "calls; early exit:", res.early_exit)

# A noisy oracle flips its answer 20% of the time; the fallback picks the best
# score seen when nothing clears the threshold.

# %%

noisy = select(cands, OracleScorer(noise_rate=0.2, seed=1), ctx, SelectionConfig(gamma=0.95))
print("noisy choice", noisy.chosen.point, "scores", noisy.scores)

# Self-aggregation averages one score per crop size. The crop size travels
# with the window, so a scorer can behave differently per scale.

# %%

def by_scale(ctx, point, window):
    return 0.4 if window.size == 1200 else 0.9

print(self_aggregate_score(ctx, cands[0].point, by_scale, (1200, 1400)))
