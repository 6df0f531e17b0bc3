import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pixel_raster_oracle
from patch_actor.errors import EmptySupervision, InvalidArgument
from patch_actor.geometry import (
    NormBBox,
    PatchMask,
    make_grid,
    patch_center_px,
    patch_centers,
    rasterize_bbox,
    target_from_mask,
)


@pytest.mark.parametrize(
    "dims, expected",
    [((448, 336, 28), (16, 12)), ((449, 336, 28), (17, 12)), ((28, 28, 28), (1, 1))],
)
def test_make_grid(dims, expected):
    g = make_grid(*dims)
    assert (g.cols, g.rows) == expected
    assert g.size == expected[0] * expected[1]


@pytest.mark.parametrize("dims", [(0, 10, 28), (10, -1, 28), (10, 10, 0)])
def test_make_grid_rejects_nonpositive(dims):
    with pytest.raises(InvalidArgument):
        make_grid(*dims)


def test_bbox_invariants():
    with pytest.raises(InvalidArgument):
        NormBBox(0.5, 0.0, 0.4, 1.0)
    with pytest.raises(InvalidArgument):
        NormBBox(0.0, 0.0, 1.1, 1.0)


def on(mask, grid):
    return {(i % grid.cols, i // grid.cols) for i in np.flatnonzero(mask.bits)}


def test_full_cover():
    g = make_grid(280, 280, 28)
    assert rasterize_bbox(NormBBox(0, 0, 1, 1), g).count == 100


def test_small_box_matches_pixel_oracle():
    g = make_grid(280, 280, 28)
    box = NormBBox(0.1, 0.1, 0.3, 0.3)
    mask = rasterize_bbox(box, g)
    assert on(mask, g) == {(1, 1), (2, 1), (1, 2), (2, 2)}
    assert np.array_equal(mask.bits, pixel_raster_oracle(box, 10, 10, 28))


def test_point_box_expands_to_one_patch():
    g = make_grid(280, 280, 28)
    box = NormBBox(0.25, 0.5, 0.25, 0.5)
    mask = rasterize_bbox(box, g)
    assert on(mask, g) == {(2, 5)}
    assert np.array_equal(mask.bits, pixel_raster_oracle(box, 10, 10, 28))


def test_point_on_far_edge_clamps():
    g = make_grid(280, 280, 28)
    assert on(rasterize_bbox(NormBBox(1.0, 1.0, 1.0, 1.0), g), g) == {(9, 9)}


def test_right_edge_on_patch_boundary_excludes_next_patch():
    g = make_grid(280, 280, 28)
    assert on(rasterize_bbox(NormBBox(0.0, 0.0, 0.5, 0.1), g), g) == {(c, 0) for c in range(5)}


boxes = st.tuples(*[st.floats(0, 1, allow_nan=False)] * 4).map(
    lambda t: NormBBox(min(t[0], t[2]), min(t[1], t[3]), max(t[0], t[2]), max(t[1], t[3]))
)


@settings(max_examples=200, deadline=None)
@given(box=boxes, cols=st.integers(1, 20), rows=st.integers(1, 20))
def test_rasterize_matches_oracle_property(box, cols, rows):
    g = make_grid(cols * 8, rows * 8, 8)
    assert np.array_equal(rasterize_bbox(box, g).bits, pixel_raster_oracle(box, cols, rows, 8))


@settings(max_examples=200, deadline=None)
@given(box=boxes, grow=st.tuples(*[st.floats(0, 0.5)] * 4), cols=st.integers(1, 20), rows=st.integers(1, 20))
def test_enlarging_box_never_clears_bits(box, grow, cols, rows):
    g = make_grid(cols * 10, rows * 10, 10)
    big = NormBBox(
        max(box.left - grow[0], 0), max(box.top - grow[1], 0), min(box.right + grow[2], 1), min(box.bottom + grow[3], 1)
    )
    small_bits = rasterize_bbox(box, g).bits
    big_bits = rasterize_bbox(big, g).bits
    # a degenerate point box is a special case; enlarge only real boxes
    if box.right > box.left and box.bottom > box.top:
        assert np.all(big_bits >= small_bits)


@settings(max_examples=100, deadline=None)
@given(box=boxes)
def test_nondegenerate_box_is_nonempty(box):
    assert rasterize_bbox(box, make_grid(448, 336, 28)).count >= 1


def test_target_four_positives():
    g = make_grid(280, 280, 28)
    t = target_from_mask(rasterize_bbox(NormBBox(0.1, 0.1, 0.3, 0.3), g), 1e-6)
    pos = t.probs[t.probs > 0]
    assert len(pos) == 4
    assert np.all(pos == 1 / (4 + 1e-6))
    assert t.probs.sum() == pytest.approx(4 / (4 + 1e-6), abs=1e-15)
    assert 1 - 1e-6 <= t.probs.sum() <= 1


def test_target_single_positive():
    g = make_grid(28, 56, 28)
    t = target_from_mask(PatchMask(g, np.array([0, 1], dtype=np.uint8)))
    assert t.probs[1] == 1 / (1 + 1e-6)
    assert t.probs[0] == 0


def test_target_empty_mask_raises():
    g = make_grid(56, 56, 28)
    with pytest.raises(EmptySupervision):
        target_from_mask(PatchMask(g, np.zeros(4, dtype=np.uint8)))


def test_target_bad_epsilon():
    g = make_grid(28, 28, 28)
    with pytest.raises(InvalidArgument):
        target_from_mask(PatchMask(g, np.ones(1, dtype=np.uint8)), 0.0)


def test_patch_centers():
    g = make_grid(448, 336, 28)
    assert patch_center_px(0, g) == (14, 14)
    assert patch_center_px(g.cols, g) == (14, 42)
    wide = make_grid(449, 336, 28)
    assert wide.cols == 17
    x, _ = patch_center_px(16, wide)
    assert x <= 448
    with pytest.raises(InvalidArgument):
        patch_center_px(g.size, g)
    with pytest.raises(InvalidArgument):
        patch_center_px(-1, g)


@pytest.mark.parametrize("dims", [(448, 336, 28), (449, 337, 28), (100, 30, 7), (28, 28, 28)])
def test_patch_center_is_injective(dims):
    g = make_grid(*dims)
    pts = {patch_center_px(i, g) for i in range(g.size)}
    assert len(pts) == g.size
    assert np.array_equal(patch_centers(g), np.array([patch_center_px(i, g) for i in range(g.size)]))
