"""``patch-actor`` command line.

Every subcommand reads an optional JSON config file (``--config``); flags
override config values, which override built-in defaults. A seed is always
required. The resolved configuration and a digest of every input file are
logged before any work starts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import actionhead, synthgui
from .candidates import SelectionConfig, build_candidates
from .errors import DegenerateLabels, EmptySupervision, PatchActorError, SchemaError, UnsupportedVersion
from .evalharness import PLAIN, VERIFIED, evaluate, write_results
from .geometry import make_grid
from .verifier import (
    OracleScorer,
    ScoringContext,
    VerifierTrainConfig,
    load_verifier,
    save_verifier,
    select,
    train_toy_verifier,
    verifier_accuracy,
)
from .visualize import OverlayConfig, base_image_for, overlay_filename, render_overlay, write_ppm

log = logging.getLogger("patch_actor")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_EMPTY_SUPERVISION = 5
EXIT_DEGENERATE_LABELS = 6

DEFAULTS = {
    "seed": None,
    "out": None,
    "model": None,
    "dataset": None,
    "verifier": None,
    # data generation
    "image_w_px": 448,
    "image_h_px": 336,
    "patch_px": 28,
    "class_count": 8,
    "n_elements": [3, 6],
    "n_train_screens": 1000,
    "n_test_screens": 100,
    "noise_scale": 0.1,
    "min_gap": 1,
    "adjacent": False,
    # training
    "d": 32,
    "learning_rate": 1e-2,
    "epochs": 12,
    "batch_size": 32,
    "mode": "full",
    "warmup_epochs": 1,
    "verifier_learning_rate": 0.05,
    "verifier_steps": 400,
    # selection / evaluation
    "pipeline": PLAIN,
    "scorer": "oracle",
    "noise_rate": 0.0,
    "gamma": 0.95,
    "max_pool": 20,
    "rel_filter": 0.2,
    "crop_px": 1000,
    "agg_crops": [1200, 1400],
    "self_aggregate": False,
    "workers": 1,
    # visualization
    "records": None,
    "alpha": 0.3,
    "resample": "nearest",
}


def _csv_ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of key/value settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--model")
    common.add_argument("--dataset")
    common.add_argument("--verifier", help="toy verifier file (for --scorer toy)")
    common.add_argument("--pipeline", choices=[PLAIN, VERIFIED])
    common.add_argument("--scorer", choices=["oracle", "toy"])
    common.add_argument("--noise-rate", dest="noise_rate", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--max-pool", dest="max_pool", type=int)
    common.add_argument("--crop-px", dest="crop_px", type=int)
    common.add_argument("--agg-crops", dest="agg_crops", type=_csv_ints)
    common.add_argument("--self-aggregate", dest="self_aggregate", action="store_true", default=None)
    common.add_argument("--workers", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--mode", choices=["full", "lite"])
    common.add_argument("--records", type=_csv_ints, help="comma-separated record indices")

    parser = argparse.ArgumentParser(prog="patch-actor", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=fn.__doc__.splitlines()[0])
        sp.set_defaults(func=fn)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise SchemaError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    if cfg["seed"] is None:
        raise SchemaError("a seed is required (--seed or config 'seed')")
    return cfg


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _log_run(command: str, cfg: dict) -> None:
    log.info("%s config %s", command, json.dumps(cfg, sort_keys=True))
    for key in ("model", "dataset", "verifier"):
        if cfg.get(key):
            log.info("input %s %s sha256=%s", key, cfg[key], _digest(cfg[key]))


def _require(cfg: dict, *keys) -> None:
    for k in keys:
        if not cfg.get(k):
            raise SchemaError(f"--{k.replace('_', '-')} is required")
        if k in ("model", "dataset", "verifier") and not Path(cfg[k]).exists():
            raise FileNotFoundError(cfg[k])


def _selection(cfg: dict) -> SelectionConfig:
    return SelectionConfig(
        max_pool=cfg["max_pool"],
        rel_filter=cfg["rel_filter"],
        gamma=cfg["gamma"],
        crop_px=cfg["crop_px"],
        agg_crops=tuple(cfg["agg_crops"]),
        self_aggregate=bool(cfg["self_aggregate"]),
    )


def _scorer(cfg: dict):
    if cfg["scorer"] == "toy":
        _require(cfg, "verifier")
        return load_verifier(cfg["verifier"])
    return OracleScorer(cfg["noise_rate"], cfg["seed"])


def _load_records(cfg: dict, strict: bool = False):
    records, bad = synthgui.read_records(cfg["dataset"], strict)
    if bad:
        log.warning("skipped malformed records at indices %s", bad)
    return records, bad


def _emit(cfg: dict, text: str, default_name: str | None = None) -> None:
    out = cfg.get("out")
    if not out:
        sys.stdout.write(text)
        return
    path = Path(out)
    if default_name and (path.is_dir() or out.endswith("/")):
        path.mkdir(parents=True, exist_ok=True)
        path = path / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_gen_data(cfg: dict) -> int:
    """Generate grounding and verifier datasets (train and test splits)."""
    _require(cfg, "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    grid = make_grid(cfg["image_w_px"], cfg["image_h_px"], cfg["patch_px"])
    n_el = cfg["n_elements"]
    n_el = tuple(n_el) if isinstance(n_el, list) else int(n_el)
    common = dict(
        grid=grid,
        n_elements=n_el,
        class_count=cfg["class_count"],
        noise_scale=cfg["noise_scale"],
        min_gap=cfg["min_gap"],
        adjacent=cfg["adjacent"],
    )
    seed = cfg["seed"]
    train = synthgui.gen_dataset(seed, cfg["n_train_screens"], **common)
    test = synthgui.gen_dataset(seed + 1, cfg["n_test_screens"], **common)
    synthgui.write_records(out / "train.jsonl", train)
    synthgui.write_records(out / "test.jsonl", test)
    synthgui.write_verifier_data(out / "verifier_train.jsonl", synthgui.gen_verifier_data(train, seed + 2))
    synthgui.write_verifier_data(out / "verifier_test.jsonl", synthgui.gen_verifier_data(test, seed + 3))
    log.info("wrote %d train / %d test records to %s", len(train), len(test), out)
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    """Train the action head; writes model.json and loss.csv."""
    _require(cfg, "dataset", "out")
    records, _ = _load_records(cfg, strict=True)
    tc = actionhead.TrainConfig(
        learning_rate=cfg["learning_rate"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        mode=cfg["mode"],
        warmup_epochs=cfg["warmup_epochs"],
        d=cfg["d"],
    )
    result = actionhead.train(records, tc)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    actionhead.save(result.model, out / "model.json")
    actionhead.write_loss_curve(out / "loss.csv", result.loss_curve)
    log.info("trained in %.1fs, final loss %.5f", result.seconds, result.loss_curve[-1])
    return EXIT_OK


def cmd_train_verifier(cfg: dict) -> int:
    """Train the toy verifier on a verifier dataset using a model's encoder."""
    _require(cfg, "dataset", "model", "out")
    examples, _ = synthgui.read_verifier_data(cfg["dataset"])
    model = actionhead.load(cfg["model"])
    vc = VerifierTrainConfig(cfg["verifier_learning_rate"], cfg["verifier_steps"], seed=cfg["seed"])
    verifier = train_toy_verifier(examples, model.encoder, vc)
    log.info("verifier training accuracy %.4f", verifier_accuracy(verifier, examples))
    out = Path(cfg["out"])
    if out.is_dir() or cfg["out"].endswith("/"):
        out.mkdir(parents=True, exist_ok=True)
        out = out / "verifier.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_verifier(verifier, out)
    return EXIT_OK


def _map_records(cfg: dict, records, fn) -> list:
    if cfg["workers"] > 1:
        with ThreadPoolExecutor(max_workers=cfg["workers"]) as pool:
            return list(pool.map(fn, enumerate(records)))
    return [fn(item) for item in enumerate(records)]


def cmd_infer(cfg: dict) -> int:
    """Write candidate click points for every record (JSON lines)."""
    _require(cfg, "model", "dataset")
    model = actionhead.load(cfg["model"])
    records, _ = _load_records(cfg)
    sel = _selection(cfg)

    def run(item):
        i, rec = item
        cands = build_candidates(actionhead.predict(model, rec), sel)
        return json.dumps({"index": i, **cands.to_json()})

    lines = _map_records(cfg, records, run)
    _emit(cfg, "".join(line + "\n" for line in lines), "candidates.jsonl")
    return EXIT_OK


def cmd_select(cfg: dict) -> int:
    """Run verifier selection over every record (JSON lines)."""
    _require(cfg, "model", "dataset")
    model = actionhead.load(cfg["model"])
    records, _ = _load_records(cfg)
    sel = _selection(cfg)
    scorer = _scorer(cfg)

    def run(item):
        i, rec = item
        cands = build_candidates(actionhead.predict(model, rec), sel)
        res = select(cands, scorer, ScoringContext(rec), sel)
        return json.dumps({"index": i, **res.to_json()})

    lines = _map_records(cfg, records, run)
    _emit(cfg, "".join(line + "\n" for line in lines), "selections.jsonl")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    """Evaluate a pipeline; report JSON to --out, table to stdout."""
    _require(cfg, "model", "dataset")
    model = actionhead.load(cfg["model"])
    records, bad = _load_records(cfg)
    sel = _selection(cfg)
    scorer = _scorer(cfg) if cfg["pipeline"] == VERIFIED else None
    extra = {"scorer": cfg["scorer"], "noise_rate": cfg["noise_rate"], "seed": cfg["seed"]} if scorer else None
    report, results = evaluate(
        records, model, cfg["pipeline"], sel, scorer, workers=cfg["workers"], malformed=bad, digest_extra=extra
    )
    if cfg.get("out"):
        out = Path(cfg["out"])
        if out.is_dir() or cfg["out"].endswith("/"):
            out.mkdir(parents=True, exist_ok=True)
            out = out / "report.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.dumps())
        write_results(out.with_suffix(".records.jsonl"), results)
        print(report.table())
    else:
        print(report.dumps(), end="")
    return EXIT_OK


def cmd_visualize(cfg: dict) -> int:
    """Write attention overlays as {record_id}.overlay.ppm."""
    _require(cfg, "model", "dataset", "out")
    model = actionhead.load(cfg["model"])
    records, _ = _load_records(cfg)
    ids = cfg["records"] if cfg["records"] is not None else list(range(len(records)))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    oc = OverlayConfig(cfg["alpha"], cfg["resample"])
    for i in ids:
        rec = records[i]
        amap = actionhead.predict(model, rec)
        img = render_overlay(base_image_for(rec), amap.weights, rec.grid, oc)
        write_ppm(out / overlay_filename(i), img)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-verifier": cmd_train_verifier,
    "infer": cmd_infer,
    "select": cmd_select,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("PATCH_ACTOR_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        _log_run(args.command, cfg)
        return args.func(cfg)
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc)
        return EXIT_MISSING_FILE
    except (SchemaError, UnsupportedVersion) as exc:
        log.error("schema mismatch: %s", exc)
        return EXIT_SCHEMA
    except EmptySupervision as exc:
        log.error("empty supervision: %s", exc)
        return EXIT_EMPTY_SUPERVISION
    except DegenerateLabels as exc:
        log.error("degenerate labels: %s", exc)
        return EXIT_DEGENERATE_LABELS
    except PatchActorError as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
