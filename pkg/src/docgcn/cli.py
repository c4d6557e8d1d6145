"""Command-line entry point: ``docgcn generate|train|evaluate|extract|ablate|gradcheck``.

Settings come from built-in defaults, then an optional INI file (sections
``[generate]``, ``[train]``, ``[ablate]``), then command-line flags. Exit codes:
0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .document import DocumentParseError, load_corpus
from .model import ConfigError, TrainConfig
from .numeric import CheckpointError, NumericError
from .synthetic import GeneratorConfig, generate_corpus, write_corpus
from .training import (
    TrainingDiverged,
    ambiguous_types,
    evaluate,
    extraction_record,
    history_csv,
    load_model,
    save_model,
    segment_accuracy,
    train,
)

log = logging.getLogger("docgcn")

MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")

# ablation grid: cell name -> TrainConfig overrides
GRID = {
    "full": {},
    "no_edge": {"no_edge_features": True},
    "no_text": {"no_text_features": True},
    "no_attention": {"no_attention": True},
    "layers1": {"n_layers": 1},
    "layers2": {"n_layers": 2},
    "layers3": {"n_layers": 3},
}


class UsageError(Exception):
    """Bad command line or configuration; exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------- config


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            state = raw.strip().lower()
            if state not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {raw!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[state]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (tuple, list)):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            kind = type(default[0]) if default else str
            values = [kind(v) for v in items]
            return tuple(values) if isinstance(default, tuple) else values
        return raw.strip()
    except ValueError as err:
        raise UsageError(f"{where}: {err}") from None


def _section_overrides(parser: configparser.ConfigParser, section: str, cls) -> dict:
    if not parser.has_section(section):
        return {}
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in parser.items(section):
        where = f"config [{section}] {key}"
        if key not in defaults:
            raise UsageError(f"{where}: unknown field (known: {', '.join(sorted(defaults))})")
        out[key] = _coerce(raw, defaults[key], where)
    return out


def read_config(path: str | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    if path is None:
        return parser
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as err:
        raise UsageError(f"config {path}: {err}") from None
    unknown = set(parser.sections()) - {"generate", "train", "ablate"}
    if unknown:
        raise UsageError(f"config {path}: unknown section(s) {sorted(unknown)}")
    return parser


def generator_config(args, parser) -> GeneratorConfig:
    values = _section_overrides(parser, "generate", GeneratorConfig)
    for key in ("n_documents", "n_templates", "jitter", "seed"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    try:
        return GeneratorConfig(**values).validate()
    except ValueError as err:
        raise UsageError(f"[generate] {err}") from None


def train_config(args, parser) -> TrainConfig:
    values = _section_overrides(parser, "train", TrainConfig)
    for key in ("mode", "seed", "epochs", "lr", "n_layers", "patience"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    try:
        return TrainConfig(**values).validate()
    except (ConfigError, TypeError) as err:
        raise UsageError(f"[train] {err}") from None


# --------------------------------------------------------------- manifest


def version_string() -> str:
    """``git describe``-style identifier of the source tree, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, payload) -> None:
    write_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    outputs: list[str]
    duration_seconds: float
    started_at: str
    extra: dict = dataclasses.field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST
        write_json(path, dataclasses.asdict(self))
        return path


def _finish(args, out_dir: Path, config: dict, seed: int, outputs, t0: float, **extra) -> None:
    manifest = RunManifest(
        command=args.command,
        config=config,
        seed=seed,
        version=version_string(),
        outputs=sorted(str(Path(p).relative_to(out_dir)) for p in outputs),
        duration_seconds=round(time.perf_counter() - t0, 3),
        started_at=args.started_at,
        extra=extra,
    )
    manifest.write(out_dir)


# ---------------------------------------------------------------- corpora


def corpus_paths(args) -> dict[str, Path]:
    """Split files from ``--corpus DIR`` with per-split overrides."""
    paths = {}
    base = Path(args.corpus) if args.corpus else None
    for split in SPLITS:
        explicit = getattr(args, split, None)
        if explicit:
            paths[split] = Path(explicit)
        elif base is not None and (base / f"{split}.ndjson").exists():
            paths[split] = base / f"{split}.ndjson"
    if "train" not in paths:
        raise FileNotFoundError("no training corpus: pass --corpus DIR with train.ndjson or --train FILE")
    for split, path in paths.items():
        if not path.is_file():
            raise FileNotFoundError(f"{split} corpus not found: {path}")
    return paths


def load_splits(args, mode: str = "word") -> dict[str, list]:
    return {split: load_corpus(path, mode) for split, path in corpus_paths(args).items()}


def metrics_payload(model, docs, mode: str, seed: int, amb: list[str], split: str) -> dict:
    metrics = evaluate(model, docs)
    extra = {"split": split, "n_documents": len(docs)}
    if amb:
        extra["ambiguous_types"] = amb
        extra["ambiguous_f1"] = metrics.subset_f1(amb)
    if model.mode == "gcn_multitask":
        extra["segment_accuracy"] = segment_accuracy(model, docs)
    return metrics.to_json(mode, seed, **extra)


# --------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    cfg = generator_config(args, read_config(args.config))
    out = Path(args.out_dir)
    corpus = generate_corpus(cfg)
    paths = write_corpus(corpus, out, manifest=False)
    _finish(args, out, dataclasses.asdict(cfg), cfg.seed, paths.values(), t0, corpus=corpus.manifest())
    print(f"wrote {sum(len(getattr(corpus, s)) for s in SPLITS)} documents to {out}")
    return 0


def _train_and_write(cfg: TrainConfig, splits: dict, out: Path, prefix: str = "") -> tuple[dict, list[Path]]:
    result = train(splits["train"], cfg, splits.get("val", ()))
    split = "test" if splits.get("test") else ("val" if splits.get("val") else "train")
    amb = ambiguous_types(splits["train"])
    payload = metrics_payload(result.model, splits[split], cfg.mode, cfg.seed, amb, split)
    payload["best_epoch"] = result.best_epoch
    payload["dropped_entities"] = result.dropped_entities
    outputs = [out / f"{prefix}metrics.json", out / f"{prefix}history.csv"]
    write_json(outputs[0], payload)
    write_atomic(outputs[1], history_csv(result.history))
    if not prefix:
        outputs.append(out / "checkpoint.json")
        save_model(result.model, outputs[-1])
    return payload, outputs


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = train_config(args, read_config(args.config))
    splits = load_splits(args, cfg.tokenizer)
    out = Path(args.out_dir)
    payload, outputs = _train_and_write(cfg, splits, out)
    _finish(args, out, cfg.to_dict(), cfg.seed, outputs, t0)
    print(f"{cfg.mode}: micro-F1 {payload['micro_f1']:.4f} on {payload['split']} -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    model = load_model(args.checkpoint)
    docs = load_corpus(args.corpus, model.config.tokenizer)
    out = Path(args.out_dir)
    amb = ambiguous_types(docs)
    payload = metrics_payload(model, docs, model.mode, model.config.seed, amb, Path(args.corpus).name)
    path = out / "metrics.json"
    write_json(path, payload)
    _finish(args, out, model.config.to_dict(), model.config.seed, [path], t0, checkpoint=str(args.checkpoint))
    print(f"{model.mode}: micro-F1 {payload['micro_f1']:.4f} on {len(docs)} documents")
    return 0


def cmd_extract(args) -> int:
    t0 = time.perf_counter()
    model = load_model(args.checkpoint)
    docs = sorted(load_corpus(args.documents, model.config.tokenizer), key=lambda d: d.doc_id)
    out = Path(args.out_dir)
    records, attention = [], {}
    for doc in docs:
        ex = model.prepare(doc)
        records.append(extraction_record(model, ex))
        if args.attention:
            attention[doc.doc_id] = [a.tolist() for a in model.attention_matrices(ex)]
    outputs = [out / "extractions.json"]
    write_json(outputs[0], {"mode": model.mode, "documents": records})
    if args.attention:
        outputs.append(out / "attention.json")
        write_json(outputs[1], attention)
    _finish(args, out, model.config.to_dict(), model.config.seed, outputs, t0, checkpoint=str(args.checkpoint))
    print(f"extracted {sum(len(r['entities']) for r in records)} entities from {len(docs)} documents")
    return 0


def _run_cell(name: str, cfg_dict: dict, paths: dict, out: str) -> tuple[str, dict, list[str]]:
    cfg = TrainConfig.from_dict(cfg_dict)
    splits = {k: load_corpus(v, cfg.tokenizer) for k, v in paths.items()}
    payload, outputs = _train_and_write(cfg, splits, Path(out), prefix=f"{name}.")
    payload["cell"] = name
    write_json(outputs[0], payload)
    return name, payload, [str(p) for p in outputs]


def summary_table(rows: list[tuple[str, dict]]) -> str:
    lines = ["cell,mode,n_layers,micro_f1,ambiguous_f1,best_epoch"]
    for name, p in rows:
        amb = p.get("ambiguous_f1")
        lines.append(
            f"{name},{p['mode']},{p['n_layers']},{p['micro_f1']:.4f},"
            f"{'' if amb is None else f'{amb:.4f}'},{p['best_epoch']}"
        )
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    t0 = time.perf_counter()
    parser = read_config(args.config)
    base = train_config(args, parser)
    if base.mode not in ("gcn", "gcn_multitask"):
        raise UsageError(f"ablate needs a graph mode, got {base.mode!r}")
    cells = args.cells.split(",") if args.cells else None
    if cells is None and parser.has_option("ablate", "cells"):
        cells = [c.strip() for c in parser.get("ablate", "cells").split(",") if c.strip()]
    cells = cells or list(GRID)
    unknown = [c for c in cells if c not in GRID]
    if unknown:
        raise UsageError(f"unknown ablation cell(s) {unknown}; choose from {', '.join(GRID)}")
    paths = {k: str(v) for k, v in corpus_paths(args).items()}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs, aliases = [], {}
    seen: dict[str, str] = {}
    for name in cells:
        cfg = dataclasses.replace(base, **GRID[name]).validate()
        key = json.dumps(cfg.to_dict(), sort_keys=True)
        if key in seen:  # e.g. layers2 is the full model at the default depth
            aliases[name] = seen[key]
            continue
        seen[key] = name
        jobs.append((name, cfg.to_dict(), paths, str(out)))

    results: dict[str, dict] = {}
    outputs: list[str] = []
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(jobs))) as pool:
            finished = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        finished = [_run_cell(*job) for job in jobs]
    for name, payload, files in finished:
        results[name] = payload
        outputs += files
    for name, source in aliases.items():
        payload = dict(results[source], cell=name)
        results[name] = payload
        write_json(out / f"{name}.metrics.json", payload)
        write_atomic(out / f"{name}.history.csv", (out / f"{source}.history.csv").read_text())
        outputs += [str(out / f"{name}.metrics.json"), str(out / f"{name}.history.csv")]
    rows = []
    for name in cells:
        cfg = dataclasses.replace(base, **GRID[name])
        results[name]["n_layers"] = cfg.n_layers
        rows.append((name, results[name]))
    table = summary_table(rows)
    write_atomic(out / "summary.csv", table)
    outputs.append(str(out / "summary.csv"))
    _finish(args, out, base.to_dict(), base.seed, outputs, t0, cells=cells)
    print(table, end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import run_gradcheck

    t0 = time.perf_counter()
    report = run_gradcheck(inject_sign_flip=args.inject_sign_flip, seed=args.seed or 0)
    print(report.table())
    passed = report.resolved_passed if args.resolved_only else report.passed
    if args.out_dir:
        out = Path(args.out_dir)
        path = out / "gradcheck.json"
        write_json(path, report.to_json())
        _finish(
            args, out, {"inject_sign_flip": args.inject_sign_flip, "resolved_only": args.resolved_only},
            args.seed or 0, [path], t0, passed=passed,
        )
    return 0 if passed else 2


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", help="INI file with [generate], [train] and [ablate] sections")
    shared.add_argument("--seed", type=int, help="seed for every random choice (overrides the file)")
    shared.add_argument("--out-dir", default="out", help="directory for all outputs and the manifest")
    shared.add_argument("--jobs", type=int, default=1, help="parallel processes for ablation cells")
    shared.add_argument("--mode", choices=["baseline1", "baseline2", "gcn", "gcn_multitask"])
    shared.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    def corpus_flags(p):
        p.add_argument("--corpus", help="directory holding train/val/test.ndjson")
        for split in SPLITS:
            p.add_argument(f"--{split}", help=f"{split} NDJSON file (overrides --corpus)")

    def train_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--n-layers", type=int)
        p.add_argument("--patience", type=int)

    parser = _Parser(prog="docgcn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"docgcn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[shared], help="write a synthetic corpus")
    p.add_argument("--n-documents", type=int)
    p.add_argument("--n-templates", type=int)
    p.add_argument("--jitter", type=float)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[shared], help="train one model and score it")
    corpus_flags(p)
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[shared], help="score a checkpoint on a labeled corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="labeled NDJSON file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract", parents=[shared], help="extract entities from documents")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--documents", required=True, help="NDJSON file; annotations are ignored")
    p.add_argument("--attention", action="store_true", help="also export attention matrices")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("ablate", parents=[shared], help="run the ablation and depth grid")
    corpus_flags(p)
    train_flags(p)
    p.add_argument("--cells", help=f"comma-separated subset of: {', '.join(GRID)}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference check of every gradient path")
    p.add_argument("--inject-sign-flip", action="store_true", help="corrupt one gradient; the check must fail")
    p.add_argument(
        "--resolved-only",
        action="store_true",
        help="gate on coordinates above the finite-difference roundoff floor",
    )
    p.set_defaults(func=cmd_gradcheck, out_dir=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args.started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (
        OSError,
        DocumentParseError,
        CheckpointError,
        TrainingDiverged,
        NumericError,
        ValueError,
    ) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
