# # Plain vs verified
#
# The harness scores a whole dataset: element accuracy per instruction
# class, hit@k for the candidate list, and how many verifier calls each
# record needed.

# %%

from patch_actor import OracleScorer, SelectionConfig, evaluate, gen_dataset

from pathlib import Path

from patch_actor.actionhead import load

# the model saved by 02_train_action_head.py
MODEL = Path(__file__).with_name("out") / "model.json"
if not MODEL.exists():
    raise SystemExit("run 02_train_action_head.py first")
model = load(MODEL)

test = gen_dataset(seed=2, n_screens=60, n_elements=(3, 6))

plain, _ = evaluate(test, model, "plain")
print(plain.table())

# %%

for noise in (0.0, 0.1, 0.3):
    rep, _ = evaluate(test, model, "verified", SelectionConfig(gamma=0.95), OracleScorer(noise, seed=0), workers=2)
    print(f"noise {noise}: accuracy {rep.overall:.3f}, calls/record {rep.verifier['mean_evaluated']:.2f}")
