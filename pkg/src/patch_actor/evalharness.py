"""Element accuracy and Hit@k over grounding datasets."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .actionhead import Model, predict
from .candidates import CandidateSet, SelectionConfig, build_candidates
from .errors import InvalidArgument, PatchActorError
from .geometry import NormBBox
from .synthgui import GroundingRecord
from .verifier import ScoringContext, select

log = logging.getLogger(__name__)

REPORT_SCHEMA = "patch-actor/report/v1"
PLAIN, VERIFIED = "plain", "verified"
MAX_MALFORMED_FRACTION = 0.10


def element_hit(point, gt_bbox: NormBBox, image_dims) -> bool:
    """Inclusive point-in-box test in normalized coordinates."""
    w, h = image_dims
    return gt_bbox.contains(point[0] / w, point[1] / h)


def hit_at_k(candidates: CandidateSet | Sequence, gt_bbox: NormBBox, k: int, image_dims=None) -> bool:
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    if image_dims is None:
        image_dims = (candidates.grid.image_w_px, candidates.grid.image_h_px)
    return any(element_hit(c.point, gt_bbox, image_dims) for c in list(candidates)[:k])


@dataclass
class EvalRecordResult:
    index: int
    uid: str
    category: str
    point: tuple[float, float]
    hit: bool
    hits_at: dict[int, bool]
    evaluated_count: int | None = None
    early_exit: bool | None = None
    n_candidates: int = 0

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["hits_at"] = {str(k): v for k, v in self.hits_at.items()}
        return obj


@dataclass
class EvalReport:
    pipeline: str
    categories: dict[str, dict]
    overall: float
    hit_at: dict[str, float]
    counts: dict[str, int]
    verifier: dict[str, float] | None
    config_digest: str
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "pipeline": self.pipeline,
            "categories": self.categories,
            "overall": self.overall,
            "hit_at": self.hit_at,
            "verifier": self.verifier,
            "counts": self.counts,
            "config_digest": self.config_digest,
            "notes": self.notes,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        lines = [f"pipeline: {self.pipeline}", f"{'category':<16}{'n':>6}{'acc':>9}"]
        for name, row in self.categories.items():
            lines.append(f"{name:<16}{row['count']:>6}{row['accuracy']:>9.4f}")
        lines.append(f"{'overall':<16}{self.counts['evaluated']:>6}{self.overall:>9.4f}")
        lines.append("  ".join(f"hit@{k}={v:.4f}" for k, v in self.hit_at.items()))
        if self.verifier:
            lines.append(f"mean evaluated candidates={self.verifier['mean_evaluated']:.3f}")
        return "\n".join(lines)


def config_digest(cfg: SelectionConfig, pipeline: str, extra: dict | None = None) -> str:
    blob = json.dumps({"cfg": asdict(cfg), "pipeline": pipeline, **(extra or {})}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def evaluate_record(
    index: int,
    record: GroundingRecord,
    model: Model,
    pipeline: str,
    cfg: SelectionConfig,
    scorer=None,
    max_k: int = 5,
) -> EvalRecordResult:
    cands = build_candidates(predict(model, record), cfg)
    dims = record.image_dims
    hits_at = {k: hit_at_k(cands, record.gt_bbox, k, dims) for k in range(1, max_k + 1)}
    res = EvalRecordResult(index, record.uid, record.category_name, cands[0].point, hits_at[1], hits_at, n_candidates=len(cands))
    if pipeline == VERIFIED:
        sel = select(cands, scorer, ScoringContext(record), cfg)
        res.point = sel.chosen.point
        res.hit = element_hit(sel.chosen.point, record.gt_bbox, dims)
        res.evaluated_count = sel.evaluated_count
        res.early_exit = sel.early_exit
    return res


def evaluate(
    records: Sequence[GroundingRecord],
    model: Model,
    pipeline: str = PLAIN,
    cfg: SelectionConfig | None = None,
    scorer=None,
    workers: int = 1,
    categories: Sequence[str] | None = None,
    malformed: Sequence[int] = (),
    max_k: int = 5,
    digest_extra: dict | None = None,
) -> tuple[EvalReport, list[EvalRecordResult]]:
    """Score every record and aggregate.

    ``malformed`` lists indices the loader already dropped; they are reported
    and count towards the abort threshold. ``categories`` names the categories
    the caller expects; ones without records are omitted with a note.
    """
    cfg = cfg or SelectionConfig()
    if pipeline not in (PLAIN, VERIFIED):
        raise InvalidArgument(f"unknown pipeline {pipeline!r}")
    if pipeline == VERIFIED and scorer is None:
        raise InvalidArgument("verified pipeline needs a scorer")
    total = len(records) + len(malformed)
    if total and len(malformed) / total > MAX_MALFORMED_FRACTION:
        raise PatchActorError(f"{len(malformed)} of {total} records malformed; aborting")

    def run(item):
        i, rec = item
        return evaluate_record(i, rec, model, pipeline, cfg, scorer, max_k)

    items = list(enumerate(records))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(it) for it in items]
    return summarize(results, pipeline, cfg, categories, malformed, digest_extra), results


def summarize(
    results: Sequence[EvalRecordResult],
    pipeline: str,
    cfg: SelectionConfig,
    categories: Sequence[str] | None = None,
    malformed: Sequence[int] = (),
    digest_extra: dict | None = None,
) -> EvalReport:
    by_cat: dict[str, list[EvalRecordResult]] = {}
    for r in results:
        by_cat.setdefault(r.category, []).append(r)
    notes = []
    names = list(categories) if categories is not None else sorted(by_cat)
    for extra in sorted(set(by_cat) - set(names)):
        names.append(extra)
    cats = {}
    for name in names:
        rows = by_cat.get(name, [])
        if not rows:
            notes.append(f"category {name} has no records; omitted")
            continue
        cats[name] = {"accuracy": sum(r.hit for r in rows) / len(rows), "count": len(rows)}
    n = len(results)
    overall = sum(r.hit for r in results) / n if n else 0.0
    ks = sorted(results[0].hits_at) if results else [1, 3]
    hit_at = {str(k): (sum(r.hits_at[k] for r in results) / n if n else 0.0) for k in ks}
    verifier = None
    if pipeline == VERIFIED:
        verifier = {
            "mean_evaluated": sum(r.evaluated_count for r in results) / n if n else 0.0,
            "early_exit_rate": sum(bool(r.early_exit) for r in results) / n if n else 0.0,
        }
    if malformed:
        notes.append(f"skipped malformed records at indices {list(malformed)}")
    counts = {"evaluated": n, "malformed": len(malformed)}
    return EvalReport(pipeline, cats, overall, hit_at, counts, verifier, config_digest(cfg, pipeline, digest_extra), notes)


def write_results(path, results: Sequence[EvalRecordResult]) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json()) + "\n")
