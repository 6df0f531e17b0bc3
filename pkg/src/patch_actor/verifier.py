"""Grounding verifier: scoring marked points and picking one candidate.

A scorer is any callable ``scorer(ctx, point, window) -> float in [0, 1]``
where ``ctx`` is a :class:`ScoringContext`, ``point`` the marked pixel and
``window`` the :class:`CropWindow` the verifier gets to look at. Two
implementations ship here: :class:`OracleScorer`, which knows the ground
truth and can be made noisy, and :class:`ToyVerifier`, a logistic model over
crop-local patch features.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .candidates import CandidatePoint, CandidateSet, SelectionConfig
from .errors import DegenerateLabels, InvalidArgument, SchemaError, UnsupportedVersion
from .geometry import PatchGrid, patch_index_at
from .synthgui import EncoderParams, GroundingRecord, VerifierExample, encode_record

log = logging.getLogger(__name__)

VERIFIER_SCHEMA = "patch-actor/verifier/v1"


@dataclass(frozen=True)
class CropWindow:
    left: int
    top: int
    right: int
    bottom: int
    # requested side length before clipping; lets a scorer tell scales apart
    size: int = field(default=0, compare=False)

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def height(self) -> int:
        return self.bottom - self.top

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.left, self.top, self.right, self.bottom


def crop_window(point, crop_px: int, image_w: int, image_h: int) -> CropWindow:
    """Square crop of side ``crop_px`` around ``point``, clipped to the image."""
    if crop_px < 1:
        raise InvalidArgument("crop_px must be >= 1")
    x = min(max(int(math.floor(point[0])), 0), image_w - 1)
    y = min(max(int(math.floor(point[1])), 0), image_h - 1)
    half = crop_px // 2
    left, top = max(0, x - half), max(0, y - half)
    right, bottom = min(image_w, x + half), min(image_h, y + half)
    # crop_px == 1 would otherwise give an empty window
    return CropWindow(left, top, max(right, left + 1), max(bottom, top + 1), crop_px)


@dataclass(frozen=True, eq=False)
class ScoringContext:
    record: GroundingRecord

    @property
    def image_dims(self) -> tuple[int, int]:
        return self.record.image_dims


class Scorer(Protocol):
    def __call__(self, ctx: ScoringContext, point: tuple[float, float], window: CropWindow) -> float: ...


def point_in_gt(record: GroundingRecord, point) -> bool:
    w, h = record.image_dims
    return record.gt_bbox.contains(point[0] / w, point[1] / h)


def _unit_draw(*key) -> float:
    """Deterministic uniform draw in [0, 1) keyed by arbitrary values."""
    blob = "|".join(repr(k) for k in key).encode()
    seed = int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")
    return float(np.random.default_rng(seed).random())


def oracle_score(record: GroundingRecord, point, noise_rate: float = 0.0, seed: int = 0) -> float:
    """1.0 inside the ground truth, 0.0 outside; flipped with ``noise_rate``."""
    truth = point_in_gt(record, point)
    if noise_rate > 0:
        flip = _unit_draw(seed, record.uid, round(float(point[0]), 6), round(float(point[1]), 6)) < noise_rate
        truth = truth != flip
    return 1.0 if truth else 0.0


@dataclass(frozen=True)
class OracleScorer:
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.noise_rate < 1:
            raise InvalidArgument("noise_rate must lie in [0, 1)")

    def __call__(self, ctx: ScoringContext, point, window: CropWindow) -> float:
        return oracle_score(ctx.record, point, self.noise_rate, self.seed)


# -- selection -----------------------------------------------------------------


@dataclass(frozen=True)
class SelectionResult:
    chosen: CandidatePoint
    score: float
    evaluated_count: int
    early_exit: bool
    fallback_used: bool
    scores: tuple[float, ...] = ()
    failures: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {
            "chosen": self.chosen.to_json(),
            "score": self.score,
            "evaluated_count": self.evaluated_count,
            "early_exit": self.early_exit,
            "fallback_used": self.fallback_used,
        }


def _safe_score(scorer, ctx, point, window) -> float | None:
    try:
        s = float(scorer(ctx, point, window))
    except Exception as exc:  # selection must stay total
        log.warning("scorer failed at %s: %s", point, exc)
        return None
    if not 0.0 <= s <= 1.0:
        log.warning("scorer returned %r outside [0, 1] at %s", s, point)
        return None
    return s


def self_aggregate_score(ctx: ScoringContext, point, scorer, agg_crops: Sequence[int]) -> float:
    """Mean of the scorer over one crop per listed size."""
    if not agg_crops:
        raise InvalidArgument("agg_crops must be nonempty")
    w, h = ctx.image_dims
    vals = []
    for c in agg_crops:
        s = _safe_score(scorer, ctx, point, crop_window(point, c, w, h))
        vals.append(0.0 if s is None else s)
    return float(np.mean(vals))


def score_candidate(ctx: ScoringContext, cand: CandidatePoint, scorer, cfg: SelectionConfig) -> float | None:
    if cfg.self_aggregate:
        return self_aggregate_score(ctx, cand.point, scorer, cfg.agg_crops)
    w, h = ctx.image_dims
    return _safe_score(scorer, ctx, cand.point, crop_window(cand.point, cfg.crop_px, w, h))


def select(
    candidates: CandidateSet | Sequence[CandidatePoint],
    scorer,
    ctx: ScoringContext,
    cfg: SelectionConfig | None = None,
    executor=None,
) -> SelectionResult:
    """Walk candidates by descending attention weight and stop at the first
    whose score beats ``cfg.gamma``. Without such a candidate, fall back to
    the best-scoring one (earliest on ties). ``gamma == 0`` accepts the top
    candidate outright, even when it scores exactly 0.

    With an ``executor`` every candidate is scored up front in parallel; the
    result (including ``evaluated_count``) is the same as the sequential walk.
    """
    cfg = cfg or SelectionConfig()
    cands = list(candidates)
    if not cands:
        raise InvalidArgument("no candidates to select from")
    if executor is not None:
        pre = list(executor.map(lambda c: score_candidate(ctx, c, scorer, cfg), cands))
    scores, failures = [], []
    for k, cand in enumerate(cands):
        s = pre[k] if executor is not None else score_candidate(ctx, cand, scorer, cfg)
        if s is None:
            failures.append(k)
            s = 0.0
        scores.append(s)
        if s > cfg.gamma or cfg.gamma == 0:
            return SelectionResult(cand, s, k + 1, True, False, tuple(scores), tuple(failures))
    best = int(np.argmax(scores))
    return SelectionResult(cands[best], scores[best], len(cands), False, True, tuple(scores), tuple(failures))


# -- toy verifier --------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def crop_features(feats: np.ndarray, anchor: np.ndarray, grid: PatchGrid, point, window: CropWindow) -> np.ndarray:
    """Feature vector the toy verifier sees for one marked point.

    The patch under the marker and the mean of its 3x3 neighbourhood (limited
    to patches inside the crop) are each paired with the instruction through
    an outer product, so a linear model can express "this region matches
    this instruction". The marker's offset within its patch is appended.
    """
    x = min(max(point[0], window.left), window.right - 1e-9)
    y = min(max(point[1], window.top), window.bottom - 1e-9)
    idx = patch_index_at(x, y, grid)
    r, c = divmod(idx, grid.cols)
    p = grid.patch_px
    near = []
    for rr in range(max(r - 1, 0), min(r + 2, grid.rows)):
        for cc in range(max(c - 1, 0), min(c + 2, grid.cols)):
            cx, cy = (cc + 0.5) * p, (rr + 0.5) * p
            if window.left <= cx < window.right and window.top <= cy < window.bottom or (rr, cc) == (r, c):
                near.append(rr * grid.cols + cc)
    center = feats[idx]
    pooled = feats[near].mean(axis=0)
    offset = np.array([x / p - c - 0.5, y / p - r - 0.5])
    return np.concatenate([np.outer(center, anchor).ravel(), np.outer(pooled, anchor).ravel(), center, pooled, offset])


@dataclass
class VerifierTrainConfig:
    learning_rate: float = 0.05
    steps: int = 400
    l2: float = 1e-4
    seed: int = 0


@dataclass(eq=False)
class ToyVerifier:
    weights: np.ndarray
    bias: float
    encoder: EncoderParams
    # feature standardisation learned on the training set
    mean: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.weights.shape[0]
        if self.mean is None:
            self.mean = np.zeros(n)
        if self.scale is None:
            self.scale = np.ones(n)

    def features(self, record: GroundingRecord, point, window: CropWindow | None = None) -> np.ndarray:
        fs = encode_record(record, self.encoder)
        if window is None:
            window = CropWindow(0, 0, *record.image_dims)
        raw = crop_features(fs.patch_features, fs.anchor, record.grid, point, window)
        return (raw - self.mean) / self.scale

    def logit(self, record, point, window=None) -> float:
        return float(self.features(record, point, window) @ self.weights + self.bias)

    def __call__(self, ctx: ScoringContext, point, window: CropWindow) -> float:
        # sigmoid of the logit equals P(true) / (P(true) + P(false)) for a
        # two-way softmax over the label tokens
        return float(_sigmoid(self.logit(ctx.record, point, window)))

    def to_json(self) -> dict:
        return {
            "schema": VERIFIER_SCHEMA,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "encoder": {k: v.tolist() for k, v in self.encoder.named().items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ToyVerifier":
        if not isinstance(obj, dict) or "schema" not in obj:
            raise SchemaError("verifier file has no schema field")
        if obj["schema"] != VERIFIER_SCHEMA:
            raise UnsupportedVersion(f"expected {VERIFIER_SCHEMA}, found {obj['schema']}")
        try:
            enc = EncoderParams(**{k: np.asarray(v, dtype=np.float64) for k, v in obj["encoder"].items()})
            return cls(
                np.asarray(obj["weights"], dtype=np.float64),
                float(obj["bias"]),
                enc,
                np.asarray(obj["mean"], dtype=np.float64),
                np.asarray(obj["scale"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"verifier file incomplete: {exc}") from exc


def save_verifier(v: ToyVerifier, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(v.to_json()) + "\n")


def load_verifier(path) -> ToyVerifier:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return ToyVerifier.from_json(obj)


def logistic_loss_and_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean binary cross-entropy of sigmoid(Xw + b) plus (l2/2)|w|^2."""
    z = X @ w + b
    # log(1 + e^z) - y z, written to stay finite for large |z|
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * float(w @ w)
    r = (_sigmoid(z) - y) / len(y)
    return float(loss), X.T @ r + l2 * w, float(r.sum())


def example_matrix(examples: Sequence[VerifierExample], encoder: EncoderParams) -> tuple[np.ndarray, np.ndarray]:
    cache: dict = {}
    rows = []
    for ex in examples:
        rec = ex.record
        key = rec.uid
        if key not in cache:
            cache[key] = encode_record(rec, encoder)
        fs = cache[key]
        window = CropWindow(0, 0, *rec.image_dims)
        rows.append(crop_features(fs.patch_features, fs.anchor, rec.grid, ex.marked_point, window))
    return np.array(rows), np.array([float(ex.label) for ex in examples])


def train_toy_verifier(
    examples: Sequence[VerifierExample],
    encoder: EncoderParams,
    config: VerifierTrainConfig | None = None,
) -> ToyVerifier:
    """Full-batch Adam on the mean cross-entropy, starting from zero weights."""
    config = config or VerifierTrainConfig()
    if not examples:
        raise InvalidArgument("no verifier examples")
    X, y = example_matrix(examples, encoder)
    if y.min() == y.max():
        raise DegenerateLabels("verifier training data has a single label")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Xs = (X - mean) / scale
    w = np.zeros(X.shape[1])
    b = 0.0
    m = np.zeros(X.shape[1] + 1)
    v = np.zeros_like(m)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, config.steps + 1):
        _, gw, gb = logistic_loss_and_grad(w, b, Xs, y, config.l2)
        g = np.append(gw, gb)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = config.learning_rate * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        w -= step[:-1]
        b -= step[-1]
    return ToyVerifier(w, float(b), encoder.copy(), mean, scale)


def verifier_accuracy(verifier: ToyVerifier, examples: Sequence[VerifierExample]) -> float:
    X, y = example_matrix(examples, verifier.encoder)
    z = ((X - verifier.mean) / verifier.scale) @ verifier.weights + verifier.bias
    return float(np.mean((z > 0) == (y > 0.5)))


ScorerFn = Callable[[ScoringContext, tuple, CropWindow], float]
