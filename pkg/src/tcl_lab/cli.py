"""Command-line entry point: generate, train, eval, verify-lemmas, ablate, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .ablation import ABLATION_SCHEMA, AblationSpec, render_ablation, run_ablation
from .backbone import BackboneConfig, CheckpointError, init_params
from .kinsynth import ConfigError, CSVParseError, GenerationConfig, build_splits, load_csv, save_csv
from .metrics import DEFAULT_HORIZONS, SCHEMA_TAG, RunReport, evaluate
from .objective import default_epochs, default_segments, lemma32_check, write_lemma_report
from .trainer import TrainConfig, TrainConfigError, TrainingData, TrainingDiverged, restore, resume, train

log = logging.getLogger("tcl_lab")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


def _read_json(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    try:
        with open(p) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from None


def _load_split(data_dir: str | Path, name: str):
    path = Path(data_dir) / f"{name}.csv"
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    return load_csv(path)


def _parse_horizons(text: str | None) -> list[int]:
    if not text:
        return list(DEFAULT_HORIZONS)
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--horizons expects comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = GenerationConfig(**_read_json(args.config)) if args.config else GenerationConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = build_splits(cfg)
    for name in SPLITS:
        save_csv(splits[name], out / f"{name}.csv")
    with open(out / "generation.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
    print(" ".join(f"{name}={len(splits[name])}" for name in SPLITS) + f" -> {out}")
    return 0


def _train_config(doc: dict, t_h: int, t_p: int) -> tuple[TrainConfig, BackboneConfig]:
    doc = dict(doc)
    backbone = BackboneConfig(**{**doc.pop("backbone", {}), "T_h": t_h, "T_p": t_p})
    K = int(doc.pop("K", 3))
    if "schedule" not in doc:
        doc["schedule"] = {"t_h": t_h, "segments": default_segments(t_p, K), "stage_epochs": default_epochs(K)}
    cfg = TrainConfig.from_dict(doc)
    if "init_seed" not in doc.get("backbone", {}):
        backbone.init_seed = cfg.seed
    return cfg, backbone


def cmd_train(args) -> int:
    doc = _read_json(args.config)
    train_ds, val_ds = _load_split(args.data, "train"), _load_split(args.data, "val")
    if len(train_ds) == 0:
        raise UsageError(f"{args.data}: empty training split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.csv"
    ckpt_dir = out / "checkpoints"
    data = TrainingData.from_splits(train_ds, val_ds)
    if args.resume:
        if not Path(args.resume).is_file():
            raise UsageError(f"file not found: {args.resume}")
        _, stages = resume(args.resume, data, checkpoint_dir=ckpt_dir,
                           checkpoint_every=args.checkpoint_every, metrics_path=metrics)
    else:
        cfg, backbone = _train_config(doc, train_ds.t_h, train_ds.t_p)
        if metrics.exists():
            metrics.unlink()
        _, stages = train(cfg, data, init_params(backbone), backbone, checkpoint_dir=ckpt_dir,
                          checkpoint_every=args.checkpoint_every, metrics_path=metrics)
    for s in stages:
        alpha = "" if s.alpha_hat is None else f" alpha_hat={s.alpha_hat:.4f}"
        errs = ", ".join(f"{e:.5f}" for e in s.task_errors)
        print(f"stage {s.stage}: task errors [{errs}]{alpha}")
    print(f"checkpoint: {ckpt_dir / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"file not found: {args.checkpoint}")
    ckpt = restore(args.checkpoint)
    params = init_params(ckpt.backbone)
    params.load_values(ckpt.params)
    test = _load_split(args.data, args.split)
    report = evaluate(params, ckpt.backbone, test, ckpt.norm, _parse_horizons(args.horizons),
                      ckpt.stages, {"train": ckpt.train_config}, ckpt.train_config.get("seed", 0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    cells = "  ".join(f"@{h}={v:.5f}" for h, v in report.mpjpe_by_horizon.items())
    print(f"avg={report.avg_error:.5f}  {cells}")
    return 0


def cmd_verify_lemmas(args) -> int:
    report = lemma32_check(args.resolution, K=args.K)
    if args.out:
        write_lemma_report(report, args.out, write_grid=not args.no_grid)
    d = report.to_dict()
    print(f"min gap {d['lemma31']['min_gap']:.3e} (>= 0: {d['lemma31']['pass']})")
    arg = d["lemma32"]["argmax"]
    print(f"max gap for b >= 1/2: {d['lemma32']['max_gap']:.10f} at a={arg['a']:.4f}, b={arg['b']:.4f}; "
          f"log(3/2) = {d['lemma32']['log_3_2']:.10f} (pass: {d['lemma32']['pass']})")
    for k, v in d["lemma32"]["stage_bounds"].items():
        print(f"  k={k}: bound {v:.10f}")
    return 0 if report.passed else 1


def cmd_ablate(args) -> int:
    spec_path = Path(args.spec)
    spec = AblationSpec.from_dict(_read_json(spec_path))
    if args.seeds:
        spec.seeds = [int(s) for s in args.seeds.split(",")]
    report = run_ablation(spec, base_dir=spec_path.parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.json", "w") as fh:
        json.dump(report, fh, indent=2)
    table = render_ablation(report)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return 0


def _render_run_reports(reports: list[tuple[str, dict]]) -> str:
    horizons = sorted({int(h) for _, r in reports for h in r["mpjpe_by_horizon"]})
    head = f"{'run':<28}{'avg':>10}" + "".join(f"{'@' + str(h):>10}" for h in horizons) + f"{'alpha_hat':>20}"
    lines = [head, "-" * len(head)]
    for name, r in reports:
        by_h = r["mpjpe_by_horizon"]
        alphas = ",".join(f"{a:.3f}" for a in r.get("frozen_alphas", [])) or "-"
        lines.append(
            f"{name[:27]:<28}{r['avg_error']:>10.5f}"
            + "".join(f"{by_h[str(h)]:>10.5f}" if str(h) in by_h else f"{'-':>10}" for h in horizons)
            + f"{alphas:>20}"
        )
    return "\n".join(lines) + "\n"


def _render_metrics_csv(name: str, path: Path) -> str:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return f"{name}: no epochs\n"
    last = {}
    for row in rows:
        last[row["stage"]] = row
    tasks = [c for c in rows[0] if c.startswith("task_")]
    head = f"{name[:20]:<20}{'stage':>6}{'epoch':>7}{'train':>12}{'val':>12}{'alpha':>9}" + "".join(
        f"{t:>10}" for t in tasks
    )
    lines = [head, "-" * len(head)]
    for stage, row in last.items():
        alpha = row["live_alpha_mean"]
        lines.append(
            f"{'':<20}{stage:>6}{row['epoch']:>7}{float(row['train_loss']):>12.5f}{float(row['val_loss']):>12.5f}"
            + (f"{float(alpha):>9.4f}" if alpha else f"{'-':>9}")
            + "".join(f"{float(row[t]):>10.5f}" if row.get(t) else f"{'-':>10}" for t in tasks)
        )
    return "\n".join(lines) + "\n"


def render_report(paths: Sequence[str | Path]) -> str:
    """Plain-text summary of run reports, ablation reports and metrics CSVs."""
    runs, blocks = [], []
    for p in map(Path, paths):
        if not p.is_file():
            raise UsageError(f"file not found: {p}")
        # generic file names are labelled by their run directory
        label = p.parent.name if p.stem in ("report", "metrics") else p.stem
        if p.suffix == ".csv":
            blocks.append(_render_metrics_csv(label, p))
            continue
        doc = _read_json(p)
        schema = doc.get("schema")
        if schema == SCHEMA_TAG:
            RunReport.from_dict(doc)
            runs.append((label, doc))
        elif schema == ABLATION_SCHEMA:
            blocks.append(render_ablation(doc))
        else:
            raise UsageError(f"{p}: unrecognised report schema {schema!r}")
    if runs:
        blocks.insert(0, _render_run_reports(runs))
    return "\n".join(blocks)


def cmd_report(args) -> int:
    text = render_report(args.inputs)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcl-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a skeleton dataset and write CSV splits")
    p.add_argument("--config", help="generation config JSON (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory for train/val/test CSVs")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run multi-stage training")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--data", required=True, help="directory with train.csv and val.csv")
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics.csv")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N epochs")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a run report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory with the split CSVs")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--horizons", help="comma-separated future frame indices")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-lemmas", help="grid-check the bound inequalities")
    p.add_argument("--resolution", type=int, default=1000)
    p.add_argument("--K", type=int, default=3, help="report stage bounds for k = 2..K")
    p.add_argument("--out", help="directory for lemma_summary.json and lemma_grid.csv")
    p.add_argument("--no-grid", action="store_true", help="skip writing the full grid CSV")
    p.set_defaults(func=cmd_verify_lemmas)

    p = sub.add_parser("ablate", help="run an ablation spec")
    p.add_argument("--spec", required=True, help="ablation spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", help="comma-separated seeds overriding the spec")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render reports or metrics CSVs as a text table")
    p.add_argument("inputs", nargs="+", help="run report JSON, ablation JSON or metrics CSV files")
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CSVParseError, CheckpointError, TrainConfigError, ValueError, TypeError) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"{parser.prog}: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
