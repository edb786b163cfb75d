"""``smalign`` command line: gen, train, eval, verify and config.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
(divergence, or a property violation reported by ``verify``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .aligner import atomic_write_bytes, read_heads, write_heads
from .data import SynthConfig, ensure_dir, generate, load_dataset, write_dataset
from .evaluation import eval_modality_gap, eval_prototype_classification, eval_retrieval
from .train import MetricsRecord, TrainConfig, TrainingDiverged, TrainResult, load_state, train
from .verify import LEVELS, run_suite

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
HEADS_FILE = "heads.smah"
META_FILE = "checkpoint.json"
STATE_FILE = "state.npz"

log = logging.getLogger("smalign")


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


@dataclass
class DataSection:
    manifest: str | None = None  # existing SMAE manifest; overrides synth
    synth: dict = field(default_factory=lambda: asdict(SynthConfig()))


@dataclass
class EvalSection:
    ks: list[int] = field(default_factory=lambda: [1, 5])
    split: str = "test"
    metrics: str = "metrics.jsonl"
    summary: str = "summary.csv"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_keys(section: str, given: dict, cls) -> None:
    if not isinstance(given, dict):
        raise UsageError(f"config section {section!r} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(given) - known)
    if unknown:
        raise UsageError(f"unknown config key {section}.{unknown[0]}")


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a run-config document; every unknown key is an error."""
    _check_keys("<root>", doc, RunConfig)
    data = doc.get("data", {})
    _check_keys("data", data, DataSection)
    synth = {**asdict(SynthConfig()), **data.get("synth", {})}
    _check_keys("data.synth", synth, SynthConfig)
    _check_keys("train", doc.get("train", {}), TrainConfig)
    ev = doc.get("eval", {})
    _check_keys("eval", ev, EvalSection)
    try:
        SynthConfig(**synth).validate()
        tcfg = TrainConfig(**doc.get("train", {}))
        tcfg.validate()
        ecfg = EvalSection(**ev)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if not ecfg.ks or any(int(k) < 1 for k in ecfg.ks):
        raise UsageError("eval.ks must be a nonempty list of positive integers")
    if ecfg.split not in ("train", "val", "test"):
        raise UsageError(f"eval.split must be train, val or test, got {ecfg.split!r}")
    return RunConfig(DataSection(data.get("manifest"), synth), tcfg, ecfg)


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc)


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _out_dir(path) -> Path:
    try:
        return ensure_dir(path)
    except OSError as exc:
        raise UsageError(f"cannot write to {path}: {exc}") from exc


def _load_data(manifest):
    try:
        return load_dataset(manifest)
    except FileNotFoundError as exc:
        raise UsageError(f"missing data file: {exc.filename or exc}") from exc
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"unreadable data at {manifest}: {exc}") from exc


def _metrics_line(rec: MetricsRecord, cfg: TrainConfig) -> str:
    return json.dumps({"loss": cfg.loss, "seed": cfg.seed, **asdict(rec)}, sort_keys=True)


def _summary_csv(history: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(MetricsRecord)]
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for rec in history:
        writer.writerow(asdict(rec))
    return buf.getvalue()


def _write_checkpoint(out: Path, result: TrainResult) -> None:
    write_heads(out / HEADS_FILE, result.heads)
    _write_text(out / META_FILE, json.dumps(result.meta(), indent=2, sort_keys=True) + "\n")


# -- verbs ---------------------------------------------------------------------


def cmd_gen(args) -> int:
    run = load_run_config(args.config)
    cfg = SynthConfig(**run.data.synth)
    out = _out_dir(args.out)
    try:
        path = write_dataset(out, generate(cfg))
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {out}: {exc}") from exc
    print(str(path))
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    cfg = run.train
    if args.seed is not None:
        cfg.seed = args.seed
    if args.loss is not None:
        cfg.loss = args.loss
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = args.data or run.data.manifest
    data = _load_data(manifest) if manifest else generate(SynthConfig(**run.data.synth))
    out = _out_dir(args.out)
    metrics_path, summary_path = out / run.eval.metrics, out / run.eval.summary

    resume = None
    if args.resume:
        try:
            resume = load_state(args.resume)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot resume from {args.resume}: {exc}") from exc
        # max_epochs may grow so an interrupted or finished run can be extended
        saved, current = resume["config"], asdict(cfg)
        diff = sorted(k for k, v in current.items() if k != "max_epochs" and saved.get(k) != v)
        if diff:
            raise UsageError(f"resume state was written with a different config ({', '.join(diff)})")

    lines = [_metrics_line(r, cfg) for r in resume["history"]] if resume else []

    def on_epoch(rec: MetricsRecord) -> None:
        lines.append(_metrics_line(rec, cfg))
        _write_text(metrics_path, "\n".join(lines) + "\n")

    try:
        result = train(cfg, data, on_epoch=on_epoch, state_path=out / STATE_FILE, resume=resume,
                       eval_ks=tuple(run.eval.ks))
    except TrainingDiverged as exc:
        _write_checkpoint(out, exc.result)
        _write_text(summary_path, _summary_csv(exc.result.history))
        print(f"error: {exc}; last finite checkpoint written to {out / HEADS_FILE}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write_checkpoint(out, result)
    _write_text(summary_path, _summary_csv(result.history))
    print(json.dumps({"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
                      "stopped": result.stopped, "checkpoint": str(out / HEADS_FILE)}))
    return EXIT_OK


def evaluate(heads, data, split: str = "test", ks=(1, 5)) -> dict:
    """The JSON document printed by ``smalign eval``."""
    x, y = data.blocks(split)
    if x.n == 0 or y.n == 0:
        raise UsageError(f"split {split!r} is empty")
    recall = eval_retrieval(heads, x, y, ks)
    centroid, pair = eval_modality_gap(heads, x, y)
    return {
        "split": split,
        "num_entities": len(data.split[split]),
        "recall": {d: {str(k): v for k, v in table.items()} for d, table in recall.items()},
        "centroid_gap": centroid,
        "mean_pair_gap": pair,
        "prototype_accuracy": eval_prototype_classification(heads, x, y),
    }


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / HEADS_FILE
    try:
        heads = read_heads(ckpt)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read checkpoint {ckpt}: {exc}") from exc
    if len(heads) != 2:
        raise UsageError(f"checkpoint {ckpt} holds {len(heads)} heads, expected 2")
    data = _load_data(args.data)
    if heads[0].in_dim != data.x.dim or heads[1].in_dim != data.y.dim:
        raise UsageError(
            f"checkpoint expects dims ({heads[0].in_dim}, {heads[1].in_dim}), "
            f"data has ({data.x.dim}, {data.y.dim})"
        )
    if heads[0].out_dim != heads[1].out_dim:
        raise UsageError("checkpoint heads project to different dimensions")
    ks = [int(k) for k in args.ks.split(",")] if args.ks else [1, 5]
    try:
        report = evaluate(tuple(heads), data, args.split, ks)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    report = run_suite(args.level, seed=args.seed)
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        _write_text(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK if report["ok"] else EXIT_NUMERIC


def cmd_config(args) -> int:
    if not args.dump_defaults:
        raise UsageError("config: nothing to do (use --dump-defaults)")
    sys.stdout.write(json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smalign", description="Set-based multimodal alignment on frozen embeddings.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic data and write SMAE files")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train alignment heads")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory or manifest (overrides the config)")
    t.add_argument("--seed", type=int)
    t.add_argument("--loss", choices=["flqmia", "flvmia", "infonce", "siglip"])
    t.add_argument("--resume", help=f"{STATE_FILE} written by an earlier run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--ks", help="comma-separated recall cut-offs (default 1,5)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--level", choices=LEVELS, default="fast")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("config", help="print configuration defaults")
    c.add_argument("--dump-defaults", action="store_true")
    c.set_defaults(func=cmd_config)
    return p


def _setup_logging() -> None:
    name = os.environ.get("SMA_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"SMA_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
