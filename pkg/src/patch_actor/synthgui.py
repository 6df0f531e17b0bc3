"""Procedural synthetic GUI screens and the toy patch encoder.

A screen is a patch grid with a handful of rectangular elements, each tagged
with an element class. The encoder stands in for a frozen vision backbone:
every patch gets the embedding of the class covering it (or a background
embedding) plus per-screen Gaussian noise, and the instruction gets its own
embedding table row as the anchor vector.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptySupervision, GenerationFailed, InvalidArgument, SchemaError, UnsupportedVersion
from .geometry import NormBBox, PatchGrid, make_grid, rasterize_bbox

log = logging.getLogger(__name__)

RECORDS_SCHEMA = "patch-actor/records/v1"
VERIFIER_DATA_SCHEMA = "patch-actor/verifier-data/v1"

DEFAULT_GRID = (448, 336, 28)  # 16 x 12 patches
DEFAULT_DIM = 32
DEFAULT_CLASS_COUNT = 8
DEFAULT_NOISE = 0.1

# stream tags keep the RNG draws for layout, insets and noise independent
_LAYOUT, _INSET, _NOISE, _COUNT = 0x1A, 0x2B, 0x3C, 0x4D


def default_grid() -> PatchGrid:
    return make_grid(*DEFAULT_GRID)


@dataclass(frozen=True)
class Element:
    cls: int
    bbox: NormBBox


@dataclass(frozen=True)
class SynthScreen:
    seed: int
    grid: PatchGrid
    elements: tuple[Element, ...]
    noise_scale: float = DEFAULT_NOISE
    class_count: int = DEFAULT_CLASS_COUNT

    def class_map(self) -> np.ndarray:
        """Per-patch row into the extended embedding table (class_count = background)."""
        out = np.full(self.grid.size, self.class_count, dtype=np.int64)
        for el in self.elements:
            bits = rasterize_bbox(el.bbox, self.grid).bits.astype(bool)
            out[bits] = el.cls
        return out


@dataclass(frozen=True, eq=False)
class GroundingRecord:
    """One benchmark example.

    Synthetic records carry their ``screen``; external ones carry an
    ``image_path`` plus precomputed ``patch_features`` (and optionally an
    ``anchor``) instead.
    """

    grid: PatchGrid
    instruction: int | str
    gt_bbox: NormBBox
    screen: SynthScreen | None = None
    image_path: str | None = None
    patch_features: np.ndarray | None = None
    anchor: np.ndarray | None = None
    category: str | None = None

    @property
    def image_dims(self) -> tuple[int, int]:
        return self.grid.image_w_px, self.grid.image_h_px

    @property
    def category_name(self) -> str:
        if self.category is not None:
            return self.category
        return f"class_{self.instruction}"

    def to_json(self) -> dict:
        obj: dict = {}
        if self.screen is not None:
            obj["seed"] = self.screen.seed
        obj["grid"] = self.grid.to_json()
        if self.screen is not None:
            obj["elements"] = [{"class": el.cls, "bbox": el.bbox.as_list()} for el in self.screen.elements]
            obj["noise_scale"] = self.screen.noise_scale
            obj["class_count"] = self.screen.class_count
        if self.image_path is not None:
            obj["image_path"] = self.image_path
        if self.patch_features is not None:
            obj["patch_features"] = self.patch_features.tolist()
        if self.anchor is not None:
            obj["anchor"] = self.anchor.tolist()
        obj["instruction"] = self.instruction
        obj["gt_bbox"] = self.gt_bbox.as_list()
        if self.category is not None:
            obj["category"] = self.category
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "GroundingRecord":
        try:
            grid = PatchGrid.from_json(obj["grid"])
            gt = NormBBox.from_list(obj["gt_bbox"])
            instruction = obj["instruction"]
            screen = None
            if "elements" in obj:
                elements = tuple(Element(int(e["class"]), NormBBox.from_list(e["bbox"])) for e in obj["elements"])
                screen = SynthScreen(
                    int(obj["seed"]),
                    grid,
                    elements,
                    float(obj.get("noise_scale", DEFAULT_NOISE)),
                    int(obj.get("class_count", DEFAULT_CLASS_COUNT)),
                )
            feats = obj.get("patch_features")
            anchor = obj.get("anchor")
            if screen is None and feats is None:
                raise SchemaError("record needs either elements or patch_features")
            if feats is not None:
                feats = np.asarray(feats, dtype=np.float64)
                if feats.ndim != 2 or feats.shape[0] != grid.size:
                    raise SchemaError("patch_features must be an M x d matrix")
            if anchor is not None:
                anchor = np.asarray(anchor, dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed record: {exc}") from exc
        rec = cls(grid, instruction, gt, screen, obj.get("image_path"), feats, anchor, obj.get("category"))
        if rasterize_bbox(gt, grid).count == 0:
            raise EmptySupervision()
        return rec

    @property
    def uid(self) -> str:
        """Content hash; stable across files and positions."""
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class VerifierExample:
    record: GroundingRecord
    marked_point: tuple[float, float]
    label: bool

    def to_json(self) -> dict:
        return {"record": self.record.to_json(), "point": list(self.marked_point), "label": self.label}

    @classmethod
    def from_json(cls, obj: dict) -> "VerifierExample":
        try:
            x, y = obj["point"]
            return cls(GroundingRecord.from_json(obj["record"]), (float(x), float(y)), bool(obj["label"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed verifier example: {exc}") from exc


# -- screen generation -------------------------------------------------------


def _free(occ: np.ndarray, r0: int, c0: int, h: int, w: int, gap: int) -> bool:
    rows, cols = occ.shape
    return not occ[max(r0 - gap, 0) : min(r0 + h + gap, rows), max(c0 - gap, 0) : min(c0 + w + gap, cols)].any()


def _touches(occ: np.ndarray, r0: int, c0: int, h: int, w: int) -> bool:
    rows, cols = occ.shape
    edges = []
    if r0 > 0:
        edges.append(occ[r0 - 1, c0 : c0 + w])
    if r0 + h < rows:
        edges.append(occ[r0 + h, c0 : c0 + w])
    if c0 > 0:
        edges.append(occ[r0 : r0 + h, c0 - 1])
    if c0 + w < cols:
        edges.append(occ[r0 : r0 + h, c0 + w])
    return any(e.any() for e in edges)


def gen_screen(
    seed: int,
    grid: PatchGrid,
    n_elements: int,
    class_count: int = DEFAULT_CLASS_COUNT,
    noise_scale: float = DEFAULT_NOISE,
    min_gap: int = 1,
    max_size: tuple[int, int] = (4, 2),
    adjacent: bool = False,
    retries: int = 200,
) -> SynthScreen:
    """Place ``n_elements`` non-overlapping elements with distinct classes.

    ``min_gap`` is the number of empty patches required between elements.
    With ``adjacent=True`` every element after the first is placed flush
    against an earlier one whenever such a slot exists (``min_gap`` is then
    ignored), which produces confusable neighbours.
    """
    if n_elements < 1:
        raise InvalidArgument("n_elements must be >= 1")
    if n_elements > class_count:
        raise GenerationFailed(f"{n_elements} elements need distinct classes but only {class_count} exist")
    rng = np.random.default_rng([seed, _LAYOUT])
    inset_rng = np.random.default_rng([seed, _INSET])
    classes = rng.choice(class_count, size=n_elements, replace=False)
    occ = np.zeros(grid.shape, dtype=bool)
    max_w, max_h = min(max_size[0], grid.cols), min(max_size[1], grid.rows)
    p = grid.patch_px
    elements = []
    for k, cls in enumerate(classes):
        placed = None
        for _ in range(retries):
            w = int(rng.integers(1, max_w + 1))
            h = int(rng.integers(1, max_h + 1))
            if adjacent and k > 0:
                slots = [
                    (r, c)
                    for r in range(grid.rows - h + 1)
                    for c in range(grid.cols - w + 1)
                    if _free(occ, r, c, h, w, 0) and _touches(occ, r, c, h, w)
                ]
                if slots:
                    placed = (*slots[int(rng.integers(len(slots)))], h, w)
                    break
                continue
            r0 = int(rng.integers(0, grid.rows - h + 1))
            c0 = int(rng.integers(0, grid.cols - w + 1))
            if _free(occ, r0, c0, h, w, 0 if adjacent else min_gap):
                placed = (r0, c0, h, w)
                break
        if placed is None:
            raise GenerationFailed(f"could not place element {k} of {n_elements} on a {grid.cols}x{grid.rows} grid")
        r0, c0, h, w = placed
        occ[r0 : r0 + h, c0 : c0 + w] = True
        # inset each side by < a quarter patch so every covered patch center
        # stays inside the box
        ins = inset_rng.integers(0, p // 4 + 1, size=4)
        left = c0 * p + ins[0]
        top = r0 * p + ins[1]
        right = min((c0 + w) * p, grid.image_w_px) - ins[2]
        bottom = min((r0 + h) * p, grid.image_h_px) - ins[3]
        bbox = NormBBox.from_pixels(left, top, max(right, left + 1), max(bottom, top + 1), grid.image_w_px, grid.image_h_px)
        elements.append(Element(int(cls), bbox))
    return SynthScreen(int(seed), grid, tuple(elements), float(noise_scale), int(class_count))


def _screen_seed(seed: int, k: int) -> int:
    return int(np.random.default_rng([seed, k]).integers(0, 2**63 - 1))


def gen_dataset(
    seed: int,
    n_screens: int,
    grid: PatchGrid | None = None,
    n_elements: int | tuple[int, int] = 5,
    class_count: int = DEFAULT_CLASS_COUNT,
    noise_scale: float = DEFAULT_NOISE,
    **layout,
) -> list[GroundingRecord]:
    """One record per (screen, element); ``n_elements`` may be an inclusive range."""
    grid = grid or default_grid()
    records = []
    for k in range(n_screens):
        s = _screen_seed(seed, k)
        if isinstance(n_elements, int):
            n = n_elements
        else:
            lo, hi = n_elements
            n = int(np.random.default_rng([s, _COUNT]).integers(lo, hi + 1))
        screen = gen_screen(s, grid, n, class_count, noise_scale, **layout)
        for el in screen.elements:
            records.append(GroundingRecord(grid, el.cls, el.bbox, screen=screen))
    return records


def gen_verifier_data(records: Sequence[GroundingRecord], seed: int) -> list[VerifierExample]:
    """One positive and one negative marked point per record.

    The positive marks the center of the ground-truth box. The negative marks
    the center of another element on the same screen when there is one, else
    a random pixel outside the ground-truth box.
    """
    out = []
    for i, rec in enumerate(records):
        rng = np.random.default_rng([seed, i])
        w, h = rec.image_dims
        cx, cy = rec.gt_bbox.center()
        others = [] if rec.screen is None else [el for el in rec.screen.elements if el.bbox != rec.gt_bbox]
        if others:
            ox, oy = others[int(rng.integers(len(others)))].bbox.center()
            neg = (ox * w, oy * h)
        else:
            neg = None
            for _ in range(1000):
                x, y = int(rng.integers(0, w)), int(rng.integers(0, h))
                if not rec.gt_bbox.contains(x / w, y / h):
                    neg = (float(x), float(y))
                    break
            if neg is None:
                log.warning("record %d: ground truth covers the whole screen, no negative possible; skipped", i)
                continue
        out.append(VerifierExample(rec, (cx * w, cy * h), True))
        out.append(VerifierExample(rec, neg, bool(rec.gt_bbox.contains(neg[0] / w, neg[1] / h))))
    return out


# -- encoder -----------------------------------------------------------------


@dataclass(eq=False)
class EncoderParams:
    """Embedding tables: one row per element class, a background row, and one
    instruction row per class."""

    class_table: np.ndarray
    background: np.ndarray
    instr_table: np.ndarray

    @property
    def d(self) -> int:
        return self.class_table.shape[1]

    @property
    def class_count(self) -> int:
        return self.class_table.shape[0]

    def named(self) -> dict[str, np.ndarray]:
        return {"class_table": self.class_table, "background": self.background, "instr_table": self.instr_table}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.class_table.copy(), self.background.copy(), self.instr_table.copy())

    def extended_table(self) -> np.ndarray:
        return np.vstack([self.class_table, self.background[None, :]])


def init_encoder(class_count: int = DEFAULT_CLASS_COUNT, d: int = DEFAULT_DIM, seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng([seed, 0xE4C])
    scale = 1.0 / np.sqrt(d)
    class_table = rng.uniform(-0.5, 0.5, size=(class_count, d)) * scale
    background = rng.uniform(-0.5, 0.5, size=d) * scale
    instr_table = rng.uniform(-0.5, 0.5, size=(class_count, d)) * scale
    ext = np.vstack([class_table, background])
    for table in (ext, instr_table):
        if len(np.unique(table, axis=0)) != len(table):
            raise GenerationFailed("embedding rows collided; pick another seed")
    return EncoderParams(class_table, background, instr_table)


@dataclass(eq=False)
class FeatureSet:
    grid: PatchGrid
    patch_features: np.ndarray
    anchor: np.ndarray
    # rows into the extended class table, or None for external features
    class_map: np.ndarray | None = None
    instruction: int | str | None = None

    @property
    def d(self) -> int:
        return self.patch_features.shape[1]


def screen_noise(screen: SynthScreen, d: int) -> np.ndarray:
    if screen.noise_scale == 0:
        return np.zeros((screen.grid.size, d))
    rng = np.random.default_rng([screen.seed, _NOISE])
    return rng.standard_normal((screen.grid.size, d)) * screen.noise_scale


def encode(screen: SynthScreen, instruction: int, encoder: EncoderParams) -> FeatureSet:
    if screen.class_count != encoder.class_count:
        raise InvalidArgument(f"screen has {screen.class_count} classes, encoder {encoder.class_count}")
    cmap = screen.class_map()
    feats = encoder.extended_table()[cmap] + screen_noise(screen, encoder.d)
    anchor = encoder.instr_table[int(instruction)].copy()
    return FeatureSet(screen.grid, feats, anchor, cmap, instruction)


def encode_record(record: GroundingRecord, encoder: EncoderParams) -> FeatureSet:
    """Features for either a synthetic or an external record."""
    if record.screen is not None:
        return encode(record.screen, int(record.instruction), encoder)
    feats = record.patch_features
    if feats.shape[1] != encoder.d:
        raise InvalidArgument(f"precomputed features have d={feats.shape[1]}, model expects {encoder.d}")
    if record.anchor is not None:
        anchor = record.anchor
    elif isinstance(record.instruction, int):
        anchor = encoder.instr_table[record.instruction]
    else:
        raise InvalidArgument("free-text instruction needs a precomputed anchor")
    return FeatureSet(record.grid, np.array(feats, dtype=np.float64), np.array(anchor, dtype=np.float64), None, record.instruction)


# -- serialization -------------------------------------------------------------


def _dump_lines(schema: str, rows: Iterable[dict]) -> str:
    lines = [json.dumps({"schema": schema})]
    lines.extend(json.dumps(r) for r in rows)
    return "\n".join(lines) + "\n"


def dumps_records(records: Iterable[GroundingRecord]) -> str:
    return _dump_lines(RECORDS_SCHEMA, (r.to_json() for r in records))


def write_records(path, records: Iterable[GroundingRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_records(records))


def _read_lines(path, schema: str, parse, strict: bool = False):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: unreadable header") from exc
    if not isinstance(header, dict) or "schema" not in header:
        raise SchemaError(f"{path}: missing schema header")
    if header["schema"] != schema:
        raise UnsupportedVersion(f"{path}: expected {schema}, found {header['schema']}")
    items, bad, empty = [], [], []
    for i, line in enumerate(lines[1:]):
        if not line.strip():
            continue
        try:
            items.append(parse(json.loads(line)))
        except EmptySupervision:
            log.warning("%s: record %d has no positive patch; skipped", path, i)
            bad.append(i)
            empty.append(i)
        except (json.JSONDecodeError, SchemaError, InvalidArgument) as exc:
            log.warning("%s: record %d skipped: %s", path, i, exc)
            bad.append(i)
    if strict and empty:
        raise EmptySupervision(f"{path}: records without a positive patch: {empty}", empty)
    if strict and bad:
        raise SchemaError(f"{path}: malformed records at indices {bad}")
    return items, bad


def read_records(path, strict: bool = False) -> tuple[list[GroundingRecord], list[int]]:
    """Return (records, indices of malformed record lines).

    With ``strict`` any bad line raises instead: EmptySupervision when some
    box covers no patch, SchemaError otherwise.
    """
    return _read_lines(path, RECORDS_SCHEMA, GroundingRecord.from_json, strict)


def write_verifier_data(path, examples: Iterable[VerifierExample]) -> None:
    with open(path, "w") as fh:
        fh.write(_dump_lines(VERIFIER_DATA_SCHEMA, (e.to_json() for e in examples)))


def read_verifier_data(path) -> tuple[list[VerifierExample], list[int]]:
    return _read_lines(path, VERIFIER_DATA_SCHEMA, VerifierExample.from_json)


def records_digest(records: Sequence[GroundingRecord]) -> str:
    return hashlib.sha256(dumps_records(records).encode()).hexdigest()


