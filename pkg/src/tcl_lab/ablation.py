"""Paired-seed ablation runs over training modes and task counts."""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig, init_params
from .diffcore import ParamStore
from .kinsynth import GenerationConfig, WindowedDataset, build_splits, load_csv
from .metrics import DEFAULT_HORIZONS, evaluate
from .objective import SegmentSchedule, default_epochs, default_segments
from .trainer import MODES, TrainConfig, TrainingData, TrainingDiverged, train

log = logging.getLogger(__name__)

ABLATION_SCHEMA = "tcl-lab/ablation/v1"


@dataclass
class Arm:
    name: str
    mode: str
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"arm {self.name!r}: unknown mode {self.mode!r}")


def default_arms() -> list[Arm]:
    return [
        Arm("one_stage", "one_stage"),
        Arm("w/o alpha", "multistage_no_alpha"),
        Arm("HC", "hand_crafted_alpha"),
        Arm("tcl", "tcl"),
    ]


@dataclass
class AblationSpec:
    """Every arm trains on the same dataset with the same seeds.

    ``dataset`` is either a generator config (``{"generate": {...}}``) or
    paths to windowed CSV splits (``{"train": ..., "val": ..., "test": ...}``).
    ``train`` holds the shared TrainConfig fields; ``segments`` / ``stage_epochs``
    fix the main schedule, defaulting to the standard split for ``K``.
    """

    arms: list[Arm] = field(default_factory=default_arms)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    task_count_sweep: list[int] = field(default_factory=list)
    sweep_mode: str = "tcl"
    dataset: dict = field(default_factory=lambda: {"generate": {}})
    backbone: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    K: int = 3
    segments: list[int] | None = None
    stage_epochs: list[int] | None = None
    horizons: list[int] = field(default_factory=lambda: list(DEFAULT_HORIZONS))
    baseline: str | None = None

    def __post_init__(self):
        self.arms = [a if isinstance(a, Arm) else Arm(**a) for a in self.arms]
        if not self.arms:
            raise ValueError("ablation needs at least one arm")
        if len({a.name for a in self.arms}) != len(self.arms):
            raise ValueError("arm names must be unique")
        if not self.seeds:
            raise ValueError("ablation needs at least one seed")
        if self.sweep_mode not in MODES:
            raise ValueError(f"unknown sweep_mode {self.sweep_mode!r}")
        if self.baseline is not None and self.baseline not in {a.name for a in self.arms}:
            raise ValueError(f"baseline {self.baseline!r} is not an arm")

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "AblationSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def schedule(self, t_h: int, t_p: int, K: int | None = None) -> SegmentSchedule:
        if K is None or K == self.K:
            K = self.K
            lengths = self.segments or default_segments(t_p, K)
            epochs = self.stage_epochs or default_epochs(K)
        else:
            lengths, epochs = default_segments(t_p, K), default_epochs(K)
        cumulative = self.train.get("cumulative", True)
        return SegmentSchedule.from_lengths(t_h, lengths, epochs, cumulative)


def load_dataset(ref: dict, base: Path | None = None) -> dict[str, WindowedDataset]:
    if "generate" in ref:
        return build_splits(GenerationConfig(**ref["generate"]))
    base = base or Path(".")
    try:
        return {name: load_csv(base / ref[name]) for name in ("train", "val", "test")}
    except KeyError as exc:
        raise ValueError(f"dataset reference needs 'generate' or train/val/test paths, missing {exc}")


def dataset_hash(splits: dict[str, WindowedDataset]) -> str:
    h = hashlib.sha256()
    for name in sorted(splits):
        ds = splits[name]
        h.update(name.encode())
        h.update(np.ascontiguousarray(ds.history, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(ds.future, dtype="<f8").tobytes())
    return h.hexdigest()


def params_hash(params: ParamStore) -> str:
    h = hashlib.sha256()
    for name, node in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(node.value, dtype="<f8").tobytes())
    return h.hexdigest()


def _median(xs: Sequence[float | None]) -> float | None:
    vals = [x for x in xs if x is not None]
    return statistics.median(vals) if vals else None


def _is_increasing(xs: Sequence[float]) -> bool:
    return len(xs) >= 2 and all(b > a for a, b in zip(xs, xs[1:]))


def run_cell(
    spec: AblationSpec,
    splits: dict[str, WindowedDataset],
    data: TrainingData,
    mode: str,
    seed: int,
    overrides: dict,
    K: int | None = None,
) -> dict:
    """Train and evaluate one (arm, seed) pair; failures are recorded, not raised."""
    train_ds = splits["train"]
    backbone = BackboneConfig(**{**spec.backbone, "init_seed": seed, "T_h": train_ds.t_h,
                                 "T_p": train_ds.t_p, "J": train_ds.joints, "D": train_ds.dims})
    schedule = spec.schedule(backbone.T_h, backbone.T_p, K)
    fields = {k: v for k, v in {**spec.train, **overrides}.items() if k != "cumulative"}
    cfg = TrainConfig(schedule, mode=mode, seed=seed, **fields)
    params = init_params(backbone)
    cell = {"mode": mode, "seed": seed, "K": schedule.K, "init_hash": params_hash(params)}
    try:
        params, stages = train(cfg, data, params, backbone)
    except TrainingDiverged as exc:
        log.warning("cell mode=%s seed=%d K=%d failed: %s", mode, seed, schedule.K, exc)
        cell.update(status="failed", error=str(exc))
        return cell
    report = evaluate(params, backbone, splits["test"], data.norm, spec.horizons, stages,
                      {"train": cfg.to_dict()}, seed)
    fm = report.forgetting_matrix
    cell.update(
        status="ok",
        avg_error=report.avg_error,
        mpjpe_by_horizon={str(h): v for h, v in report.mpjpe_by_horizon.items()},
        forgetting_matrix=fm,
        z1_forgetting=(fm[-1][0] - fm[0][0]) if len(fm) > 1 else None,
        frozen_alphas=report.frozen_alphas,
        alpha_increasing=_is_increasing(report.frozen_alphas) if len(report.frozen_alphas) >= 2 else None,
    )
    return cell


def _summarize_arm(cells: list[dict]) -> dict:
    ok = [c for c in cells if c["status"] == "ok"]
    out = {
        "runs": len(cells),
        "failed": len(cells) - len(ok),
        "median_avg_error": _median([c["avg_error"] for c in ok]),
        "median_z1_forgetting": _median([c["z1_forgetting"] for c in ok]),
    }
    if ok:
        horizons = ok[0]["mpjpe_by_horizon"].keys()
        out["median_mpjpe_by_horizon"] = {h: _median([c["mpjpe_by_horizon"][h] for c in ok]) for h in horizons}
        rows = len(ok[0]["forgetting_matrix"])
        cols = len(ok[0]["forgetting_matrix"][0]) if rows else 0
        out["median_forgetting_matrix"] = [
            [_median([c["forgetting_matrix"][i][j] for c in ok]) for j in range(cols)] for i in range(rows)
        ]
        trends = [c["alpha_increasing"] for c in ok if c["alpha_increasing"] is not None]
        if trends:
            out["alpha_increasing_runs"] = sum(trends)
            out["alpha_trend_runs"] = len(trends)
            out["frozen_alphas_by_seed"] = {str(c["seed"]): c["frozen_alphas"] for c in ok}
    return out


def run_ablation(spec: AblationSpec, base_dir: str | Path | None = None) -> dict:
    """Train every (arm, seed) pair plus the task-count sweep; returns a JSON-able report."""
    splits = load_dataset(spec.dataset, Path(base_dir) if base_dir else None)
    digest = dataset_hash(splits)
    data = TrainingData.from_splits(splits["train"], splits["val"])

    cells = []
    for seed in spec.seeds:
        for arm in spec.arms:
            log.info("arm %s seed %d", arm.name, seed)
            cell = run_cell(spec, splits, data, arm.mode, seed, arm.overrides)
            cell.update(arm=arm.name, dataset_hash=digest)
            cells.append(cell)
        inits = {c["init_hash"] for c in cells if c["seed"] == seed}
        if len(inits) != 1:
            raise RuntimeError(f"seed {seed}: arms started from different initial parameters")

    baseline = spec.baseline or spec.arms[0].name
    deltas = []
    for seed in spec.seeds:
        by_arm = {c["arm"]: c for c in cells if c["seed"] == seed}
        ref = by_arm[baseline]
        row = {"seed": seed}
        for arm in spec.arms:
            c = by_arm[arm.name]
            both_ok = c["status"] == ref["status"] == "ok"
            row[arm.name] = c["avg_error"] - ref["avg_error"] if both_ok else None
        deltas.append(row)

    sweep = []
    for K in spec.task_count_sweep:
        runs = [run_cell(spec, splits, data, spec.sweep_mode, seed, {}, K) for seed in spec.seeds]
        ok = [r for r in runs if r["status"] == "ok"]
        sweep.append({
            "K": K,
            "mode": spec.sweep_mode,
            "median_avg_error": _median([r["avg_error"] for r in ok]),
            "avg_error_by_seed": {str(r["seed"]): r.get("avg_error") for r in runs},
            "failed": len(runs) - len(ok),
        })

    return {
        "schema": ABLATION_SCHEMA,
        "spec": spec.to_dict(),
        "dataset_hash": digest,
        "baseline": baseline,
        "cells": cells,
        "paired_deltas": deltas,
        "summary": {arm.name: _summarize_arm([c for c in cells if c["arm"] == arm.name]) for arm in spec.arms},
        "task_count_sweep": sweep,
    }


def _fmt(x, digits: int = 5) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def render_ablation(report: dict) -> str:
    """Plain-text comparison table for an ablation report."""
    lines = [f"dataset {report['dataset_hash'][:12]}  seeds {report['spec']['seeds']}", ""]
    summary = report["summary"]
    horizons = []
    for s in summary.values():
        if "median_mpjpe_by_horizon" in s:
            horizons = list(s["median_mpjpe_by_horizon"])
            break
    head = f"{'arm':<14}{'avg':>10}" + "".join(f"{'@' + h:>10}" for h in horizons)
    head += f"{'Z1 forget':>12}{'failed':>8}"
    lines += [head, "-" * len(head)]
    for name, s in summary.items():
        hz = s.get("median_mpjpe_by_horizon", {})
        lines.append(
            f"{name:<14}{_fmt(s['median_avg_error']):>10}"
            + "".join(f"{_fmt(hz.get(h)):>10}" for h in horizons)
            + f"{_fmt(s['median_z1_forgetting']):>12}{s['failed']:>8}"
        )
    lines += ["", f"paired avg_error delta vs {report['baseline']} (per seed)"]
    arms = list(summary)
    lines.append(f"{'seed':<6}" + "".join(f"{a:>14}" for a in arms))
    for row in report["paired_deltas"]:
        lines.append(f"{row['seed']:<6}" + "".join(f"{_fmt(row[a], 6):>14}" for a in arms))
    for name, s in summary.items():
        if "alpha_trend_runs" in s:
            lines.append("")
            lines.append(f"{name}: frozen alpha increasing in {s['alpha_increasing_runs']}/{s['alpha_trend_runs']} runs")
            for seed, alphas in s["frozen_alphas_by_seed"].items():
                lines.append(f"  seed {seed}: " + " -> ".join(_fmt(a, 3) for a in alphas))
    if report["task_count_sweep"]:
        lines += ["", "task-count sweep (median avg_error)"]
        lines.append("".join(f"{'K=' + str(r['K']):>10}" for r in report["task_count_sweep"]))
        lines.append("".join(f"{_fmt(r['median_avg_error']):>10}" for r in report["task_count_sweep"]))
    return "\n".join(lines) + "\n"
