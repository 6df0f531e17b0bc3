import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patch_actor.actionhead import AttentionMap, softmax
from patch_actor.candidates import (
    CLUSTER_CENTER,
    PATCH,
    SelectionConfig,
    build_candidates,
    cluster,
    pool_patches,
    weighted_center,
)
from patch_actor.errors import InvalidArgument
from patch_actor.geometry import make_grid

G = make_grid(280, 280, 28)  # 10 x 10


def amap_from(weights, grid=G):
    w = np.asarray(weights, dtype=np.float64)
    return AttentionMap(grid, np.log(np.maximum(w, 1e-300)), w)


def one_hot(i, grid=G):
    w = np.full(grid.size, 1e-9)
    w[i] = 1.0
    return amap_from(w / w.sum(), grid)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        SelectionConfig(max_pool=0)
    with pytest.raises(InvalidArgument):
        SelectionConfig(rel_filter=1.5)
    with pytest.raises(InvalidArgument):
        SelectionConfig(gamma=1.5)


def test_single_hot_patch_gives_one_candidate():
    cs = build_candidates(one_hot(23))
    assert len(cs) == 1
    assert cs[0].point == (3 * 28 + 14, 2 * 28 + 14)


def test_rel_filter_and_max_pool():
    w = np.zeros(G.size)
    w[:5] = [0.5, 0.2, 0.11, 0.09, 0.1]
    w[5:] = 1e-6
    amap = amap_from(w)
    assert pool_patches(amap, SelectionConfig(rel_filter=0.2)) == [0, 1, 2, 4]
    assert pool_patches(amap, SelectionConfig(rel_filter=0.2, max_pool=2)) == [0, 1]


def test_uniform_map_tie_break_lowest_index():
    amap = amap_from(np.full(G.size, 1 / G.size))
    assert pool_patches(amap, SelectionConfig(max_pool=20)) == list(range(20))


def test_four_connectivity():
    # (0,0) and (1,1) touch only diagonally
    assert sorted(map(sorted, cluster([0, 11], None, G))) == [[0], [11]]
    assert sorted(map(sorted, cluster([0, 1, 11], None, G))) == [[0, 1, 11]]
    # row wrap is not adjacency
    assert len(cluster([9, 10], None, G)) == 2


def test_cluster_center_weighted():
    w = np.full(G.size, 0.0)
    w[0], w[1] = 0.75, 0.25
    c = weighted_center([0, 1], amap_from(w), G)
    assert c.x == pytest.approx(0.75 * 14 + 0.25 * 42)
    assert c.y == 14
    assert c.weight == 1.0 and c.source == CLUSTER_CENTER


def test_build_candidates_sorted_and_deduped():
    w = np.full(G.size, 1e-6)
    w[[0, 1, 55]] = [0.4, 0.35, 0.2]
    cs = build_candidates(amap_from(w / w.sum()))
    weights = [c.weight for c in cs]
    assert weights == sorted(weights, reverse=True)
    pts = [c.point for c in cs]
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            assert np.hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]) > 1.0
    # cluster {0,1} center outranks the lone patch 55, whose own center is merged away
    assert cs[0].source == CLUSTER_CENTER
    assert {c.source for c in cs} == {PATCH, CLUSTER_CENTER}
    assert sum(c.point == (5 * 28 + 14, 5 * 28 + 14) for c in cs) == 1


def test_json_shape():
    obj = build_candidates(one_hot(5)).to_json()
    assert set(obj) == {"candidates"}
    assert set(obj["candidates"][0]) == {"x", "y", "weight", "source"}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), cols=st.integers(1, 12), rows=st.integers(1, 12))
def test_candidate_invariants(seed, cols, rows):
    g = make_grid(cols * 28, rows * 28, 28)
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3, size=g.size)
    amap = AttentionMap(g, logits, softmax(logits))
    cfg = SelectionConfig()
    cs = build_candidates(amap, cfg)
    assert 1 <= len(cs)
    pooled = pool_patches(amap, cfg)
    assert len(pooled) <= cfg.max_pool
    assert pooled[0] == int(np.argmax(amap.weights))
    # clusters partition the pooled set and are 4-connected
    flat = sorted(i for c in cs.clusters for i in c)
    assert flat == sorted(pooled)
    ws = [c.weight for c in cs]
    assert ws == sorted(ws, reverse=True)
    for c in cs:
        assert 0 <= c.x < g.image_w_px and 0 <= c.y < g.image_h_px
