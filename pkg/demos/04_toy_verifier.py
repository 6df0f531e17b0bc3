# # A learned verifier
#
# The toy verifier is logistic regression on features around the marked
# point: the patch under it and its 3x3 neighbourhood, each crossed with the
# instruction embedding.

# %%

from patch_actor import gen_dataset, gen_verifier_data
from patch_actor.verifier import VerifierTrainConfig, logistic_loss_and_grad, train_toy_verifier, verifier_accuracy

from pathlib import Path

from patch_actor.actionhead import load

# the model saved by 02_train_action_head.py
MODEL = Path(__file__).with_name("out") / "model.json"
if not MODEL.exists():
    raise SystemExit("run 02_train_action_head.py first")
model = load(MODEL)

records = gen_dataset(seed=11, n_screens=300, n_elements=5)

train_ex = gen_verifier_data(records, seed=11)
test_ex = gen_verifier_data(gen_dataset(seed=12, n_screens=100, n_elements=5), seed=12)
print(sum(e.label for e in train_ex), "positive /", len(train_ex), "examples")

# %%

v = train_toy_verifier(train_ex, model.encoder, VerifierTrainConfig())
print("train acc", verifier_accuracy(v, train_ex), "held-out acc", verifier_accuracy(v, test_ex))

# Its score is a probability, so it drops straight into selection as a scorer.

# %%

from patch_actor import SelectionConfig, build_candidates, predict, select
from patch_actor.verifier import ScoringContext

rec = test_ex[0].record
res = select(build_candidates(predict(model, rec)), v, ScoringContext(rec), SelectionConfig())
print(res.chosen.point, res.score)
