# # Training the action head
#
# Synthetic screens give each patch a class embedding plus noise; the
# instruction picks out one element's class. The head learns to put its
# attention on that element's patches.

# %%

import numpy as np

from patch_actor import TrainConfig, gen_dataset, predict, train
from patch_actor.evalharness import element_hit

train_set = gen_dataset(seed=1, n_screens=600, n_elements=5)
test_set = gen_dataset(seed=2, n_screens=40, n_elements=5)
print(len(train_set), "train /", len(test_set), "test records")

# About half a minute on one core. The default config trains longer on 5000
# records; small batches make up for the shorter run here.

# %%

result = train(train_set, TrainConfig(epochs=6, batch_size=16, seed=0))
for epoch, loss in enumerate(result.loss_curve, 1):
    print(f"epoch {epoch}: {loss:.4f}")
print(f"{result.seconds:.1f}s")

# Accuracy: click the most attended patch and check it is inside the box.

# %%

from patch_actor.geometry import patch_center_px

hits = []
for rec in test_set:
    amap = predict(result.model, rec)
    point = patch_center_px(int(np.argmax(amap.weights)), rec.grid)
    hits.append(element_hit(point, rec.gt_bbox, rec.image_dims))
print("element accuracy", np.mean(hits))

# LiteTrain-style: freeze the embeddings and only fit the head.

# %%

lite = train(train_set, TrainConfig(epochs=6, batch_size=16, seed=0, mode="lite"))
print("lite final loss", lite.loss_curve[-1], "vs full", result.loss_curve[-1])

# Save the full model; the later demos pick it up from here.

# %%

from pathlib import Path

from patch_actor.actionhead import save

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)
save(result.model, out / "model.json")
