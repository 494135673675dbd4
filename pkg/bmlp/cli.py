"""
Command-line interface

    bmlp preprocess  raw log -> split directory + manifest
    bmlp train       split directory -> checkpoint + training log
    bmlp evaluate    checkpoint + split -> reports.jsonl
    bmlp ablate      {full, no_scb, no_fcb, no_pip, no_hip} x {S, B, T, BT} table
    bmlp sweep       grid search on validation HR@10
    bmlp bench       step time vs sequence length

Every command writes ``manifest.json`` and ``run.log`` into ``--out`` and
exits 0 on success, 1 on any error (logged with the failing stage).
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import subprocess
import sys
import time
import tomllib
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

from loguru import logger

from . import __version__
from .config import RunConfig, load_config
from .core.checkpoint import load_checkpoint, save_checkpoint
from .core.encoding import build_vocab
from .core.model import HyperParams, param_count
from .core.trainer import Trainer, write_train_log
from .data.ingest import exclude_time_range, ingest, ratings_to_behaviors
from .data.preprocess import dedup_earliest, iterative_filter
from .data.split import gen_instances, read_split_dir, split, user_sequences, write_split_dir
from .errors import BMLPError, ConfigurationError, EmptyDatasetError, StageError
from .evaluation.analysis import evaluate, evaluate_groups, group_examined, intent_testset, write_reports
from .evaluation.benchmark import bench_scaling, write_timing_files

MANIFEST = "manifest.json"
TIMINGS = "timings.json"
CHECKPOINT = "model.bmlp"


# ----------------------------------------------------------------------
# Plumbing
# ----------------------------------------------------------------------

@contextmanager
def stage(name: str, timings: Optional[Dict[str, float]] = None) -> Iterator[None]:
    """Run a pipeline stage; failures are re-raised as StageError naming it."""
    started = time.perf_counter()
    logger.info(f"[{name}] start")
    try:
        yield
    except StageError:
        raise
    except (BMLPError, OSError, ValueError, KeyError) as exc:
        raise StageError(name, exc) from exc
    if timings is not None:
        timings[name] = round((time.perf_counter() - started) * 1000.0, 3)


def version_string() -> str:
    """``git describe`` when run from a checkout, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_digest(cfg: RunConfig) -> str:
    return hashlib.md5(json.dumps(cfg.manifest(), sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def write_manifest(
    out: Path, command: str, cfg: RunConfig, timings: Optional[Dict[str, Any]] = None, **sections: Any
) -> Path:
    """
    Canonical run manifest; wall-clock timings go to a sibling ``timings.json``
    so reruns leave the manifest byte-identical.
    """
    manifest = {
        "command": command,
        "version": version_string(),
        "seed": cfg.seed,
        "config": cfg.manifest(),
        "config_md5": config_digest(cfg),
        **sections,
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if timings is not None:
        (out / TIMINGS).write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def setup_logging(level: str, out: Optional[Path]) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format="{time:HH:mm:ss} | {level:<8} | {message}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logger.add(out / "run.log", level="DEBUG", mode="w")


def split_dir_of(cfg: RunConfig) -> Path:
    if cfg.data.split_dir is None:
        raise ConfigurationError("no split directory configured (use --split-dir or [data] split_dir)")
    return Path(cfg.data.split_dir)


def split_hashes(root: Path) -> Dict[str, str]:
    return {p.name: sha256_file(p) for p in sorted(root.glob("*.bin"))}


def with_updates(hyper: HyperParams, **updates: Any) -> HyperParams:
    """Validated copy of ``hyper`` (model_copy skips validation)."""
    return HyperParams.model_validate({**hyper.model_dump(), **updates})


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------

def cmd_preprocess(cfg: RunConfig) -> Dict[str, Any]:
    out = Path(cfg.run.out)
    data = cfg.data
    split_root = Path(data.split_dir) if data.split_dir else out
    timings: Dict[str, float] = {}
    counts: Dict[str, Any] = {}

    with stage("ingest", timings):
        if data.input is None:
            raise ConfigurationError("no input file configured (use --input or [data] input)")
        result = ingest(data.input, data.format, data.columns, data.has_header, data.behaviors)
        frame = result.records
        counts.update(ingested=len(frame), malformed=result.malformed)

    with stage("transform", timings):
        if data.ratings_threshold is not None:
            frame = ratings_to_behaviors(frame, data.ratings_threshold, data.target_behavior, data.auxiliary_behavior)
        if data.exclude_start is not None:
            frame = exclude_time_range(frame, data.exclude_start, data.exclude_end)
            counts["after_exclusion"] = len(frame)

    with stage("dedup", timings):
        deduped = dedup_earliest(frame)
        counts.update(dedup_removed=len(frame) - len(deduped), after_dedup=len(deduped))

    with stage("filter", timings):
        frame, stats = iterative_filter(
            deduped, data.min_item_purchases, data.min_user_purchases, data.target_behavior
        )
        counts.update(
            filter_rounds=stats.rounds,
            after_filter=len(frame),
            users=int(frame["user"].nunique()),
            items=int(frame["item"].nunique()),
            purchases=int((frame["behavior"] == data.target_behavior).sum()),
        )

    with stage("split", timings):
        vocab = build_vocab(frame, data.target_behavior)
        parts = split(frame, vocab)
        try:
            intent = intent_testset(user_sequences(frame, vocab), vocab.target_behavior)
        except EmptyDatasetError as exc:
            logger.warning(f"No intent test set: {exc}")
            intent = None
        groups = group_examined(parts.test, cfg.model.seq_len)
        instances = gen_instances(parts.train, cfg.model, vocab)
        counts.update(
            n_items=vocab.n_items,
            n_behaviors=vocab.n_behaviors,
            behaviors=list(vocab.behaviors),
            **parts.counts(),
            train_purchases=sum(
                e.behavior == vocab.target_behavior for ev in parts.train.values() for e in ev
            ),
            train_instances=len(instances),
            examined=len(groups.examined),
            unexamined=len(groups.unexamined),
            examined_rate=groups.rate,
            intent_users=0 if intent is None else len(intent),
        )

    with stage("write", timings):
        write_split_dir(split_root, parts, vocab, intent)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(
            out,
            "preprocess",
            cfg,
            counts=counts,
            thresholds={"items": data.min_item_purchases, "users": data.min_user_purchases},
            inputs={str(data.input): sha256_file(Path(data.input))},
            outputs=split_hashes(split_root),
            timings={"stages_ms": timings},
        )
    logger.success(f"Preprocess done: {counts['test']} test samples in {split_root}")
    return counts


def _train(hyper: HyperParams, split_root: Path, threads: int, epochs: Optional[int] = None):
    parts, vocab, _ = read_split_dir(split_root)
    instances = gen_instances(parts.train, hyper, vocab)
    trainer = Trainer(hyper, vocab, threads)
    result = trainer.fit(instances, parts.validation, epochs)
    return trainer, result, parts, vocab


def cmd_train(cfg: RunConfig) -> Dict[str, Any]:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    timings: Dict[str, float] = {}
    with stage("train", timings):
        root = split_dir_of(cfg)
        trainer, result, _, vocab = _train(cfg.model, root, cfg.run.threads)
    with stage("save", timings):
        save_checkpoint(trainer.params, cfg.model, vocab, out / CHECKPOINT)
        write_train_log(result.history, out / "train_log.tsv", out / "train_timing.tsv")
        summary = {
            "best_epoch": result.best_epoch,
            "best_val_hr@10": result.best_hr,
            "epochs_run": len(result.history),
            "stopped_early": result.stopped_early,
            "param_count": trainer.params.count(),
        }
        write_manifest(
            out, "train", cfg,
            inputs=split_hashes(root),
            outputs={CHECKPOINT: sha256_file(out / CHECKPOINT)},
            result=summary,
            timings={"stages_ms": timings},
        )
    logger.success(f"Train done: checkpoint {out / CHECKPOINT}")
    return summary


def cmd_evaluate(cfg: RunConfig) -> List[Dict[str, Any]]:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    timings: Dict[str, float] = {}
    with stage("load", timings):
        root = split_dir_of(cfg)
        parts, vocab, intent = read_split_dir(root)
        ckpt = Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else out / CHECKPOINT
        params, hyper, stored_vocab = load_checkpoint(ckpt, expected=cfg.model)
        if stored_vocab.to_dict() != vocab.to_dict():
            raise ConfigurationError(f"{ckpt}: vocabulary differs from split {root}")
        if cfg.eval.intent and intent is None:
            raise EmptyDatasetError(f"{root} has no intent split")
    with stage("evaluate", timings):
        reports, extras = evaluate_groups(
            params, parts.test, hyper, vocab, cfg.eval.ks, cfg.eval.examined,
            intent if cfg.eval.intent else None, cfg.run.threads,
        )
    with stage("write", timings):
        write_reports(reports, out / "reports.jsonl")
        write_manifest(
            out, "evaluate", cfg,
            inputs={**split_hashes(root), ckpt.name: sha256_file(ckpt)},
            extras=extras,
            timings={
                "stages_ms": timings,
                "reports_ms": {r.group: round(r.wall_time_ms, 3) for r in reports},
            },
        )
    logger.success(f"Evaluate done: {len(reports)} reports")
    return [r.to_dict() for r in reports]


def _train_and_score(hyper: HyperParams, cfg: RunConfig, root: Path) -> Dict[str, Any]:
    trainer, result, parts, vocab = _train(hyper, root, cfg.run.threads)
    val = evaluate(trainer.params, parts.validation, hyper, vocab, (10,), "validation", cfg.run.threads)
    test = evaluate(trainer.params, parts.test, hyper, vocab, (10,), "all", cfg.run.threads)
    return {
        "param_count": param_count(hyper, vocab.n_items, vocab.n_behaviors),
        "val_hr@10": val.hr[10],
        "val_ndcg@10": val.ndcg[10],
        "test_hr@10": test.hr[10],
        "test_ndcg@10": test.ndcg[10],
        "best_epoch": result.best_epoch,
    }


def _write_table(path: Path, rows: Sequence[Dict[str, Any]]) -> None:
    header = list(rows[0].keys())
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(f"{row[h]:.10f}" if isinstance(row[h], float) else str(row[h]) for h in header))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_ablate(cfg: RunConfig) -> List[Dict[str, Any]]:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with stage("ablate"):
        root = split_dir_of(cfg)
        for cut in cfg.sweep.ablations:
            for variant in cfg.sweep.variants:
                ablation = [] if cut == "full" else cut.split("+")
                hyper = with_updates(cfg.model, ablation=ablation, variant=variant)
                logger.info(f"Ablation cell {hyper.label()}")
                rows.append({"ablation": cut, "variant": variant, **_train_and_score(hyper, cfg, root)})
    with stage("write"):
        _write_table(out / "ablation.tsv", rows)
        write_manifest(out, "ablate", cfg, inputs=split_hashes(root), cells=len(rows))
    logger.success(f"Ablate done: {len(rows)} cells")
    return rows


def sweep_points(grid: Dict[str, List[Any]]) -> List[Dict[str, Any]]:
    """Grid points in lexicographic (sorted key, sorted value) order."""
    keys = sorted(grid)
    axes = [sorted(grid[k]) for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes)]


def cmd_sweep(cfg: RunConfig) -> Dict[str, Any]:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with stage("sweep"):
        root = split_dir_of(cfg)
        points = sweep_points(cfg.sweep.grid)
        if not points:
            raise ConfigurationError("empty sweep grid")
        for point in points:
            hyper = with_updates(cfg.model, **point)
            logger.info(f"Sweep point {point}")
            rows.append({**point, **_train_and_score(hyper, cfg, root)})
    best_index = max(range(len(rows)), key=lambda i: (rows[i]["val_hr@10"], -i))
    best = {"point": points[best_index], "val_hr@10": rows[best_index]["val_hr@10"]}
    with stage("write"):
        _write_table(out / "sweep.tsv", rows)
        (out / "best.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(out, "sweep", cfg, inputs=split_hashes(root), best=best)
    logger.success(f"Sweep done: best {best['point']} (val HR@10 {best['val_hr@10']:.4f})")
    return best


def cmd_bench(cfg: RunConfig) -> Dict[str, Any]:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    with stage("bench"):
        curve = bench_scaling(
            cfg.model, cfg.bench.lengths, cfg.bench.repetitions, cfg.bench.warmup,
            control=cfg.bench.control, d=cfg.bench.d, width=cfg.bench.width,
        )
    with stage("write"):
        files = write_timing_files(curve, out)
        write_manifest(out, "bench", cfg, outputs=sorted(files), curve=curve.to_dict())
    logger.success(f"Bench done: ratios {[round(r, 3) for r in curve.ratios]}")
    return curve.to_dict()


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


# ----------------------------------------------------------------------
# Argument parsing
# ----------------------------------------------------------------------

def parse_set(assignments: Sequence[str]) -> Dict[str, Any]:
    """``section.key=value`` pairs into a nested dict; values parse as TOML when they can."""
    out: Dict[str, Any] = {}
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigurationError(f"--set expects section.key=value, got '{item}'")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        node = out
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bmlp", description="Behavior-aware MLP recommender")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML config file")
    common.add_argument("--out", type=Path, default=None, help="Output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="Worker cap (default: all cores)")
    common.add_argument("--log-level", default=None)
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override any config value; repeatable")

    needs_split = argparse.ArgumentParser(add_help=False)
    needs_split.add_argument("--split-dir", type=Path, default=None)
    needs_split.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("preprocess", parents=[common], help="Raw log to split directory")
    p.add_argument("--input", type=Path, default=None)
    p.add_argument("--split-dir", type=Path, default=None)

    sub.add_parser("train", parents=[common, needs_split], help="Train and checkpoint")

    p = sub.add_parser("evaluate", parents=[common, needs_split], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--intent", action="store_true", default=None, help="Also evaluate the intent split")
    p.add_argument("--no-examined", dest="examined", action="store_false", default=None)

    sub.add_parser("ablate", parents=[common, needs_split], help="Ablation x variant table")
    sub.add_parser("sweep", parents=[common, needs_split], help="Grid search on validation HR@10")

    p = sub.add_parser("bench", parents=[common], help="Step time vs sequence length")
    p.add_argument("--control", choices=["none", "constant", "quadratic"], default=None)
    p.add_argument("--lengths", type=int, nargs="+", default=None)
    p.add_argument("--repetitions", type=int, default=None)
    return parser


def overrides_from(args: argparse.Namespace) -> Dict[str, Any]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    flags = {
        "run": {"out": get("out"), "threads": get("threads"), "log_level": get("log_level")},
        "model": {"seed": get("seed"), "epochs": get("epochs")},
        "data": {"input": get("input"), "split_dir": get("split_dir")},
        "eval": {"checkpoint": get("checkpoint"), "intent": get("intent"), "examined": get("examined")},
        "bench": {"control": get("control"), "lengths": get("lengths"), "repetitions": get("repetitions")},
    }
    flags = {k: {kk: vv for kk, vv in v.items() if vv is not None} for k, v in flags.items()}
    flags = {k: v for k, v in flags.items() if v}
    for key, value in parse_set(args.set).items():
        flags[key] = {**flags.get(key, {}), **value} if isinstance(value, dict) else value
    return flags


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides_from(args))
    except (BMLPError, OSError) as exc:
        setup_logging("INFO", None)
        logger.error(f"[config] {type(exc).__name__}: {exc}")
        return 1

    setup_logging(cfg.run.log_level, Path(cfg.run.out))
    logger.info("=" * 70)
    logger.info(f"bmlp {args.command} ({version_string()}) seed={cfg.seed} threads={cfg.run.threads}")
    logger.info("=" * 70)
    try:
        COMMANDS[args.command](cfg)
    except StageError as exc:
        logger.error(str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
