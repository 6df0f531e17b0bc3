# # Looking at the attention
#
# The map is min-max scaled, pushed through a jet colormap and blended over a
# flat rendering of the screen. Output is plain binary PPM.

# %%

from pathlib import Path

from patch_actor import gen_dataset, predict
from patch_actor.actionhead import load
from patch_actor.visualize import OverlayConfig, base_image_for, draw_bbox_outline, render_overlay, write_ppm

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

if not (out / "model.json").exists():
    raise SystemExit("run 02_train_action_head.py first")
model = load(out / "model.json")
records = gen_dataset(seed=5, n_screens=3, n_elements=4)

for i in (0, 1, 2):
    rec = records[i]
    base = base_image_for(rec)
    for mode in ("nearest", "bilinear"):
        img = render_overlay(base, predict(model, rec).weights, rec.grid, OverlayConfig(alpha=0.4, resample=mode))
        write_ppm(out / f"{i}.{mode}.overlay.ppm", draw_bbox_outline(img, rec))
print(sorted(p.name for p in out.glob("*.ppm")))
