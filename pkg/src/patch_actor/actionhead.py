"""Attention-based action head.

Patch features pass through one single-head self-attention layer (no
positional encoding), the anchor and the contextual patch features are
projected by two separate tanh MLPs, and the scaled dot products between the
projected anchor and every projected patch are softmaxed into an attention
map. Training minimises KL(target || attention) with hand-written gradients.

Shapes follow the batch-first convention: ``V`` is (B, M, d), ``anchor`` is
(B, d). Weight matrices act on column vectors, so ``Wq @ v`` becomes
``V @ Wq.T`` on row-stacked features.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .errors import EmptySupervision, InvalidArgument, NumericalError, SchemaError, UnsupportedVersion
from .geometry import DEFAULT_EPSILON, PatchGrid, rasterize_bbox
from .synthgui import (
    DEFAULT_CLASS_COUNT,
    DEFAULT_DIM,
    EncoderParams,
    FeatureSet,
    GroundingRecord,
    encode_record,
    init_encoder,
    screen_noise,
)

log = logging.getLogger(__name__)

MODEL_SCHEMA = "patch-actor/model/v1"
LOG_FLOOR = np.log(1e-30)

HEAD_KEYS = ("Wq", "Wk", "Wv", "t_W1", "t_b1", "t_W2", "t_b2", "v_W1", "v_b1", "v_W2", "v_b2")
ENCODER_KEYS = ("class_table", "background", "instr_table")


@dataclass(eq=False)
class ActionHeadParams:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    t_W1: np.ndarray
    t_b1: np.ndarray
    t_W2: np.ndarray
    t_b2: np.ndarray
    v_W1: np.ndarray
    v_b1: np.ndarray
    v_W2: np.ndarray
    v_b2: np.ndarray

    @property
    def d(self) -> int:
        return self.Wq.shape[0]

    def named(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ActionHeadParams":
        return ActionHeadParams(**{k: v.copy() for k, v in self.named().items()})


def init_head(d: int = DEFAULT_DIM, seed: int = 0, qk_gain: float = 1.0) -> ActionHeadParams:
    """Gaussian init with variance 1/d; biases start at zero."""
    rng = np.random.default_rng([seed, 0x4EAD])
    mats = {k: rng.standard_normal((d, d)) / np.sqrt(d) for k in ("Wq", "Wk", "Wv", "t_W1", "t_W2", "v_W1", "v_W2")}
    mats["Wq"] *= qk_gain
    mats["Wk"] *= qk_gain
    vecs = {k: np.zeros(d) for k in ("t_b1", "t_b2", "v_b1", "v_b2")}
    return ActionHeadParams(**mats, **vecs)


@dataclass(eq=False)
class Model:
    """Action head plus the toy encoder that feeds it."""

    head: ActionHeadParams
    encoder: EncoderParams

    @property
    def d(self) -> int:
        return self.head.d

    def named(self) -> dict[str, np.ndarray]:
        return {**self.head.named(), **self.encoder.named()}

    def copy(self) -> "Model":
        return Model(self.head.copy(), self.encoder.copy())


def init_model(d: int = DEFAULT_DIM, class_count: int = DEFAULT_CLASS_COUNT, seed: int = 0) -> Model:
    return Model(init_head(d, seed), init_encoder(class_count, d, seed))


@dataclass(frozen=True, eq=False)
class AttentionMap:
    grid: PatchGrid
    raw_scores: np.ndarray
    weights: np.ndarray

    def as_2d(self) -> np.ndarray:
        return self.weights.reshape(self.grid.shape)


# -- forward -------------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_features(head: ActionHeadParams, V: np.ndarray):
    if V.ndim != 3 or V.shape[1] < 1:
        raise InvalidArgument("patch features must be (B, M, d) with M >= 1")
    if V.shape[2] != head.d:
        raise InvalidArgument(f"feature dimension {V.shape[2]} != head dimension {head.d}")


def _self_attention(head: ActionHeadParams, V: np.ndarray, cache: dict | None = None) -> np.ndarray:
    sd = np.sqrt(head.d)
    Q = V @ head.Wq.T
    K = V @ head.Wk.T
    U = V @ head.Wv.T
    P = softmax(Q @ K.transpose(0, 2, 1) / sd)
    Vt = P @ U
    if cache is not None:
        cache.update(V=V, Q=Q, K=K, U=U, P=P, Vt=Vt)
    return Vt


def _mlp(W1, b1, W2, b2, x):
    h = np.tanh(x @ W1.T + b1)
    return h @ W2.T + b2, h


def _scores(head: ActionHeadParams, anchor: np.ndarray, Vt: np.ndarray, cache: dict | None = None) -> np.ndarray:
    z, ht = _mlp(head.t_W1, head.t_b1, head.t_W2, head.t_b2, anchor)
    Z, hv = _mlp(head.v_W1, head.v_b1, head.v_W2, head.v_b2, Vt)
    alpha = np.einsum("bmd,bd->bm", Z, z) / np.sqrt(head.d)
    if cache is not None:
        cache.update(anchor=anchor, z=z, ht=ht, Z=Z, hv=hv, alpha=alpha)
    return alpha


def forward_scores(head: ActionHeadParams, V: np.ndarray, anchor: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Raw attention logits for a batch, (B, M)."""
    _check_features(head, V)
    return _scores(head, anchor, _self_attention(head, V, cache), cache)


def self_attention(head: ActionHeadParams, patch_features: np.ndarray) -> np.ndarray:
    """Contextual features for one screen, (M, d) -> (M, d)."""
    V = np.asarray(patch_features, dtype=np.float64)
    if V.ndim != 2:
        raise InvalidArgument("patch features must be an (M, d) matrix")
    _check_features(head, V[None])
    return _self_attention(head, V[None])[0]


def attend(head: ActionHeadParams, anchor: np.ndarray, contextual: np.ndarray, grid: PatchGrid) -> AttentionMap:
    contextual = np.asarray(contextual, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if contextual.shape != (grid.size, head.d) or anchor.shape != (head.d,):
        raise InvalidArgument("anchor/contextual shapes inconsistent with grid and head")
    alpha = _scores(head, anchor[None], contextual[None])[0]
    if not np.all(np.isfinite(alpha)):
        raise NumericalError("non-finite attention logits")
    return AttentionMap(grid, alpha, softmax(alpha))


def attention_map(head: ActionHeadParams, feats: FeatureSet) -> AttentionMap:
    return attend(head, feats.anchor, self_attention(head, feats.patch_features), feats.grid)


def predict(model: Model, record: GroundingRecord) -> AttentionMap:
    return attention_map(model.head, encode_record(record, model.encoder))


# -- loss ----------------------------------------------------------------------


def kl_divergence(p: np.ndarray, a: np.ndarray) -> float:
    """sum_i p_i (log p_i - log a_i) over p_i > 0, with a clamped at 1e-30."""
    p = np.asarray(p, dtype=np.float64)
    a = np.maximum(np.asarray(a, dtype=np.float64), 1e-30)
    pos = p > 0
    return float(np.sum(p[pos] * (np.log(p[pos]) - np.log(a[pos]))))


def kl_loss(target, amap: AttentionMap) -> float:
    if target.probs.shape != amap.weights.shape:
        raise InvalidArgument("target and attention map cover different grids")
    return kl_divergence(target.probs, amap.weights)


def _batch_kl(P: np.ndarray, loga: np.ndarray) -> np.ndarray:
    loga = np.maximum(loga, LOG_FLOOR)
    logp = np.log(np.where(P > 0, P, 1.0))
    return np.sum(np.where(P > 0, P * (logp - loga), 0.0), axis=-1)


# -- backward ------------------------------------------------------------------


def _mm_sum(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """sum over leading axes of outer products: A[..., i] B[..., j] -> (i, j)."""
    return A.reshape(-1, A.shape[-1]).T @ B.reshape(-1, B.shape[-1])


def loss_and_grads(
    head: ActionHeadParams, V: np.ndarray, anchor: np.ndarray, targets: np.ndarray
) -> tuple[float, dict[str, np.ndarray], np.ndarray, np.ndarray, np.ndarray]:
    """Mean KL over a batch and its exact gradients.

    Returns ``(loss, head_grads, dV, danchor, per_example_loss)`` where ``dV``
    and ``danchor`` are gradients with respect to the inputs, for routing
    into trainable embeddings.
    """
    cache: dict = {}
    alpha = forward_scores(head, V, anchor, cache)
    B = V.shape[0]
    d = head.d
    sd = np.sqrt(d)
    loga = log_softmax(alpha)
    a = np.exp(loga)
    per_example = _batch_kl(targets, loga)

    # terms whose log was clamped contribute no gradient
    pe = np.where(loga > LOG_FLOOR, targets, 0.0)
    dalpha = (a * pe.sum(-1, keepdims=True) - pe) / B

    z, Z, ht, hv = cache["z"], cache["Z"], cache["ht"], cache["hv"]
    g = {}
    dZ = dalpha[:, :, None] * z[:, None, :] / sd
    dz = np.einsum("bm,bmd->bd", dalpha, Z) / sd

    g["v_W2"] = _mm_sum(dZ, hv)
    g["v_b2"] = dZ.sum(axis=(0, 1))
    dhv = (dZ @ head.v_W2) * (1 - hv**2)
    g["v_W1"] = _mm_sum(dhv, cache["Vt"])
    g["v_b1"] = dhv.sum(axis=(0, 1))
    dVt = dhv @ head.v_W1

    g["t_W2"] = dz.T @ ht
    g["t_b2"] = dz.sum(axis=0)
    dht = (dz @ head.t_W2) * (1 - ht**2)
    g["t_W1"] = dht.T @ cache["anchor"]
    g["t_b1"] = dht.sum(axis=0)
    danchor = dht @ head.t_W1

    P, U, Q, K = cache["P"], cache["U"], cache["Q"], cache["K"]
    dP = dVt @ U.transpose(0, 2, 1)
    dU = P.transpose(0, 2, 1) @ dVt
    g["Wv"] = _mm_sum(dU, V)
    dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) / sd
    dQ = dS @ K
    dK = dS.transpose(0, 2, 1) @ Q
    g["Wq"] = _mm_sum(dQ, V)
    g["Wk"] = _mm_sum(dK, V)
    dV = dU @ head.Wv + dQ @ head.Wq + dK @ head.Wk
    return float(per_example.mean()), {k: g[k] for k in HEAD_KEYS}, dV, danchor, per_example


# -- batching ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PreparedRecord:
    """What training needs from a record, computed once."""

    target: np.ndarray
    class_map: np.ndarray | None
    noise: np.ndarray | None
    instruction: int | None
    features: np.ndarray | None = None
    anchor: np.ndarray | None = None


def prepare(records: Sequence[GroundingRecord], d: int, epsilon: float = DEFAULT_EPSILON) -> list[PreparedRecord]:
    """Rasterize targets and cache encoder inputs; rejects empty supervision."""
    bad = [i for i, r in enumerate(records) if rasterize_bbox(r.gt_bbox, r.grid).count == 0]
    if bad:
        raise EmptySupervision(f"records without a positive patch: {bad}", bad)
    out = []
    # records from one screen share its class map and noise
    per_screen: dict = {}
    for r in records:
        bits = rasterize_bbox(r.gt_bbox, r.grid).bits.astype(np.float64)
        target = bits / (bits.sum() + epsilon)
        if r.screen is not None:
            if id(r.screen) not in per_screen:
                per_screen[id(r.screen)] = (r.screen, r.screen.class_map(), screen_noise(r.screen, d))
            _, cmap, noise = per_screen[id(r.screen)]
            out.append(PreparedRecord(target, cmap, noise, int(r.instruction)))
        else:
            anchor = r.anchor if r.anchor is not None else None
            instr = int(r.instruction) if anchor is None else None
            out.append(PreparedRecord(target, None, None, instr, np.asarray(r.patch_features, dtype=np.float64), anchor))
    return out


def _assemble(batch: Sequence[PreparedRecord], encoder: EncoderParams):
    ext = encoder.extended_table()
    V = np.stack([b.features if b.class_map is None else ext[b.class_map] + b.noise for b in batch])
    anchor = np.stack([encoder.instr_table[b.instruction] if b.anchor is None else b.anchor for b in batch])
    T = np.stack([b.target for b in batch])
    return V, anchor, T


def _encoder_grads(batch: Sequence[PreparedRecord], encoder: EncoderParams, dV, danchor) -> dict[str, np.ndarray]:
    C = encoder.class_count
    d_ext = np.zeros((C + 1, encoder.d))
    d_instr = np.zeros_like(encoder.instr_table)
    for b, dv, da in zip(batch, dV, danchor):
        if b.class_map is not None:
            np.add.at(d_ext, b.class_map, dv)
        if b.anchor is None:
            d_instr[b.instruction] += da
    return {"class_table": d_ext[:C], "background": d_ext[C], "instr_table": d_instr}


def batch_loss(model: Model, batch: Sequence[PreparedRecord]) -> float:
    V, anchor, T = _assemble(batch, model.encoder)
    return float(_batch_kl(T, log_softmax(forward_scores(model.head, V, anchor))).mean())


def model_grads(model: Model, batch: Sequence[PreparedRecord], train_encoder: bool = True):
    V, anchor, T = _assemble(batch, model.encoder)
    loss, g, dV, danchor, _ = loss_and_grads(model.head, V, anchor, T)
    if train_encoder:
        g.update(_encoder_grads(batch, model.encoder, dV, danchor))
    return loss, g


# -- optimisation --------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 12
    batch_size: int = 32
    seed: int = 0
    mode: str = "full"
    warmup_epochs: int = 1
    d: int = DEFAULT_DIM
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidArgument("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument("epochs and batch_size must be >= 1")
        if self.mode not in ("full", "lite"):
            raise InvalidArgument(f"mode must be 'full' or 'lite', got {self.mode!r}")


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place for every key present in ``grads``."""
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
                self.t[k] = 0
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1**t)
            vhat = self.v[k] / (1 - self.beta2**t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    model: Model
    loss_curve: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train(records: Sequence[GroundingRecord], config: TrainConfig | None = None, model: Model | None = None) -> TrainResult:
    """Minimise the mean action-attention loss over ``records``.

    In ``full`` mode the first ``warmup_epochs`` update only the head, then
    the encoder embeddings are unfrozen. ``lite`` mode never touches them.
    Records must share one grid.
    """
    config = config or TrainConfig()
    if not records:
        raise InvalidArgument("empty training set")
    grids = {r.grid for r in records}
    if len(grids) != 1:
        raise InvalidArgument("all training records must share one grid")
    if model is None:
        class_count = next((r.screen.class_count for r in records if r.screen is not None), DEFAULT_CLASS_COUNT)
        model = init_model(config.d, class_count, config.seed)
    else:
        model = model.copy()
    prepared = prepare(records, model.d, config.epsilon)
    params = model.named()
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 0x7EA1])
    curve = []
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        train_encoder = config.mode == "full" and epoch >= config.warmup_epochs
        order = rng.permutation(len(prepared))
        total, count = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            batch = [prepared[i] for i in order[s : s + config.batch_size]]
            loss, grads = model_grads(model, batch, train_encoder)
            opt.step(params, grads)
            total += loss * len(batch)
            count += len(batch)
        curve.append(total / count)
        log.info("epoch %d mean loss %.5f", epoch + 1, curve[-1])
    return TrainResult(model, curve, time.perf_counter() - t0)


# -- persistence ---------------------------------------------------------------


def model_to_json(model: Model) -> dict:
    named = model.named()
    return {
        "schema": MODEL_SCHEMA,
        "d": model.d,
        "class_count": model.encoder.class_count,
        "shapes": {k: list(v.shape) for k, v in named.items()},
        "params": {k: v.ravel().tolist() for k, v in named.items()},
    }


def model_from_json(obj: dict) -> Model:
    if not isinstance(obj, dict) or "schema" not in obj:
        raise SchemaError("model file has no schema field")
    if obj["schema"] != MODEL_SCHEMA:
        raise UnsupportedVersion(f"expected {MODEL_SCHEMA}, found {obj['schema']}")
    try:
        arrays = {
            k: np.asarray(obj["params"][k], dtype=np.float64).reshape(obj["shapes"][k]) for k in HEAD_KEYS + ENCODER_KEYS
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"model file incomplete: {exc}") from exc
    return Model(
        ActionHeadParams(**{k: arrays[k] for k in HEAD_KEYS}),
        EncoderParams(**{k: arrays[k] for k in ENCODER_KEYS}),
    )


def dumps_model(model: Model) -> str:
    return json.dumps(model_to_json(model)) + "\n"


def save(model: Model, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_model(model))


def load(path) -> Model:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_json(obj)


def write_loss_curve(path, curve: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(curve, 1):
            w.writerow([i, repr(float(v))])
