# # Boxes on a patch grid
#
# A screenshot is cut into square patches. A ground-truth box marks every
# patch it touches, and the training target spreads probability evenly over
# those patches.

# %%

import numpy as np

from patch_actor import NormBBox, make_grid, rasterize_bbox, target_from_mask, patch_center_px

grid = make_grid(448, 336, 28)
print(grid.cols, "x", grid.rows, "patches of", grid.patch_px, "px")

# A 449 px wide image needs one more column; the last one is mostly empty.

# %%

print(make_grid(449, 336, 28).cols)

# Rasterize a button in the upper left. Edges that land exactly on a patch
# boundary do not spill into the neighbour.

# %%

button = NormBBox(0.125, 0.25, 0.25, 1 / 3)
mask = rasterize_bbox(button, grid)
print(mask.as_2d()[:5, :6])

# Point annotations (zero-size boxes) still mark the single patch under the point.

# %%

dot = NormBBox(0.5, 0.5, 0.5, 0.5)
print(np.flatnonzero(rasterize_bbox(dot, grid).bits))

# The target sums to a hair under one because of the epsilon in the denominator.

# %%

target = target_from_mask(mask)
nz = target.probs[target.probs > 0]
print(len(nz), nz[0], target.probs.sum())

# Patch centers are where clicks land. They are distinct per patch.

# %%

print([patch_center_px(i, grid) for i in np.flatnonzero(mask.bits)])
