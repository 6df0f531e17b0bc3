"""Turn an attention map into ranked click candidates.

The pool is the top-scoring patches that carry at least a fixed fraction of
the peak weight. Pooled patches are grouped into 4-connected clusters; each
cluster contributes its attention-weighted center alongside the individual
patch centers, so a target sitting between two patches still gets a point.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .actionhead import AttentionMap
from .errors import InvalidArgument
from .geometry import PatchGrid, patch_center_px

PATCH = "patch"
CLUSTER_CENTER = "cluster_center"

# candidates closer than this (pixels) are treated as one point
DEDUP_PX = 1.0


@dataclass(frozen=True)
class SelectionConfig:
    max_pool: int = 20
    rel_filter: float = 0.2
    gamma: float = 0.95
    crop_px: int = 1000
    agg_crops: tuple[int, ...] = (1200, 1400)
    self_aggregate: bool = False

    def __post_init__(self):
        if self.max_pool < 1:
            raise InvalidArgument("max_pool must be >= 1")
        if not 0 <= self.rel_filter <= 1:
            raise InvalidArgument("rel_filter must lie in [0, 1]")
        if not 0 <= self.gamma <= 1:
            raise InvalidArgument("gamma must lie in [0, 1]")
        if self.crop_px < 1 or any(c < 1 for c in self.agg_crops):
            raise InvalidArgument("crop sizes must be >= 1")
        if self.self_aggregate and not self.agg_crops:
            raise InvalidArgument("self-aggregation needs at least one crop size")


@dataclass(frozen=True)
class CandidatePoint:
    x: float
    y: float
    weight: float
    source: str = PATCH

    @property
    def point(self) -> tuple[float, float]:
        return self.x, self.y

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "weight": self.weight, "source": self.source}


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[CandidatePoint, ...]
    grid: PatchGrid
    clusters: tuple[tuple[int, ...], ...] = field(default=(), compare=False)

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i):
        return self.candidates[i]

    def to_json(self) -> dict:
        return {"candidates": [c.to_json() for c in self.candidates]}

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def pool_patches(amap: AttentionMap, cfg: SelectionConfig) -> list[int]:
    w = amap.weights
    # stable sort on -w keeps lower indices first among ties
    order = np.argsort(-w, kind="stable")
    cutoff = cfg.rel_filter * w[order[0]]
    kept = [int(i) for i in order[: cfg.max_pool] if w[i] >= cutoff]
    return kept


def cluster(indices, amap: AttentionMap | None, grid: PatchGrid) -> list[list[int]]:
    """Maximal 4-connected groups of ``indices`` on ``grid``.

    Clusters come out in order of their first member in ``indices``; members
    are listed in breadth-first order.
    """
    members = set(int(i) for i in indices)
    seen: set[int] = set()
    out = []
    for start in indices:
        start = int(start)
        if start in seen:
            continue
        seen.add(start)
        comp = []
        queue = deque([start])
        while queue:
            i = queue.popleft()
            comp.append(i)
            r, c = divmod(i, grid.cols)
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= rr < grid.rows and 0 <= cc < grid.cols:
                    j = rr * grid.cols + cc
                    if j in members and j not in seen:
                        seen.add(j)
                        queue.append(j)
        out.append(comp)
    return out


def weighted_center(members, amap: AttentionMap, grid: PatchGrid) -> CandidatePoint:
    if not members:
        raise InvalidArgument("empty cluster")
    w = np.array([amap.weights[i] for i in members], dtype=np.float64)
    pts = np.array([patch_center_px(i, grid) for i in members], dtype=np.float64)
    total = float(w.sum())
    x, y = (w[:, None] * pts).sum(axis=0) / total
    return CandidatePoint(float(x), float(y), total, CLUSTER_CENTER)


def _dedup(points: list[CandidatePoint]) -> list[CandidatePoint]:
    kept: list[CandidatePoint] = []
    for p in points:
        for k, q in enumerate(kept):
            if np.hypot(p.x - q.x, p.y - q.y) <= DEDUP_PX:
                if p.weight > q.weight:
                    kept[k] = p
                break
        else:
            kept.append(p)
    return kept


def build_candidates(amap: AttentionMap, cfg: SelectionConfig | None = None) -> CandidateSet:
    cfg = cfg or SelectionConfig()
    grid = amap.grid
    pooled = pool_patches(amap, cfg)
    points = [CandidatePoint(*patch_center_px(i, grid), float(amap.weights[i]), PATCH) for i in pooled]
    clusters = cluster(pooled, amap, grid)
    points += [weighted_center(c, amap, grid) for c in clusters]
    points = _dedup(points)
    # stable: equal weights keep insertion order (patches before centers)
    points.sort(key=lambda p: -p.weight)
    return CandidateSet(tuple(points), grid, tuple(tuple(c) for c in clusters))
