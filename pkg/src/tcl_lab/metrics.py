"""MPJPE and the run report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig, forward
from .diffcore import ParamStore
from .kinsynth import Standardizer, WindowedDataset

SCHEMA_TAG = "tcl-lab/run-report/v1"
DEFAULT_HORIZONS = (2, 4, 8, 10, 14, 25)


def per_frame_joint_error(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """[N, T, J, D] -> [N, T] mean-over-joints Euclidean error."""
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def mpjpe(pred, gt, t: int) -> float:
    """Mean per-joint position error at future frame ``t`` (1-based), averaged over samples."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 3:
        pred, gt = pred[None], gt[None]
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} vs gt {gt.shape}")
    if not 1 <= t <= pred.shape[1]:
        raise ValueError(f"horizon {t} outside 1..{pred.shape[1]}")
    return float(per_frame_joint_error(pred[:, t - 1 : t], gt[:, t - 1 : t]).mean())


def predict(
    params: ParamStore,
    cfg: BackboneConfig,
    history_std: np.ndarray,
    chunk: int = 512,
) -> tuple[np.ndarray, np.ndarray]:
    """Standardized frames [N, T_p, J, D] and raw alpha logits [N]."""
    frames, logits = [], []
    for s in range(0, len(history_std), chunk):
        out = forward(params, history_std[s : s + chunk], cfg)
        frames.append(out.frames.value)
        logits.append(out.alpha_logit.value)
    if not frames:
        return np.zeros((0, cfg.T_p, cfg.J, cfg.D)), np.zeros(0)
    return np.concatenate(frames), np.concatenate(logits)


def predict_raw(params, cfg, ds: WindowedDataset, norm: Standardizer) -> np.ndarray:
    frames, _ = predict(params, cfg, norm.transform(ds.history))
    return norm.inverse(frames)


def segment_errors(pred_raw: np.ndarray, gt_raw: np.ndarray, lengths: Sequence[int]) -> list[float]:
    """Mean MPJPE over the frames of each consecutive segment."""
    err = per_frame_joint_error(pred_raw, gt_raw).mean(axis=0)
    out, start = [], 0
    for n in lengths:
        out.append(float(err[start : start + n].mean()))
        start += n
    return out


@dataclass
class RunReport:
    mpjpe_by_horizon: dict[int, float]
    avg_error: float
    forgetting_matrix: list[list[float | None]] = field(default_factory=list)
    alpha_trajectory: list[float | None] = field(default_factory=list)
    frozen_alphas: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_TAG,
            "mpjpe_by_horizon": {str(k): v for k, v in self.mpjpe_by_horizon.items()},
            "avg_error": self.avg_error,
            "forgetting_matrix": self.forgetting_matrix,
            "alpha_trajectory": self.alpha_trajectory,
            "frozen_alphas": self.frozen_alphas,
            "config": self.config,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema") != SCHEMA_TAG:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(
            {int(k): float(v) for k, v in d["mpjpe_by_horizon"].items()},
            float(d["avg_error"]),
            d.get("forgetting_matrix", []),
            d.get("alpha_trajectory", []),
            d.get("frozen_alphas", []),
            d.get("config", {}),
            int(d.get("seed", 0)),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def forgetting_matrix(stages: Sequence) -> list[list[float | None]]:
    """Rows are stages, columns tasks; task ``j`` is only filled from stage ``j`` on."""
    K = max((len(s.task_errors) for s in stages), default=0)
    return [list(s.task_errors) + [None] * (K - len(s.task_errors)) for s in stages]


def evaluate(
    params: ParamStore,
    cfg: BackboneConfig,
    test: WindowedDataset,
    norm: Standardizer,
    horizons: Sequence[int] = DEFAULT_HORIZONS,
    stages: Sequence | None = None,
    config: dict | None = None,
    seed: int = 0,
) -> RunReport:
    """Per-horizon MPJPE (raw units) and the mean over every predicted frame.

    ``stages`` (the trainer's stage log) fills the forgetting matrix and the
    alpha traces when given.
    """
    if len(test) == 0:
        raise ValueError("evaluate: empty test split")
    for h in horizons:
        if not 1 <= h <= cfg.T_p:
            raise ValueError(f"horizon {h} outside 1..{cfg.T_p}")
    pred = predict_raw(params, cfg, test, norm)
    per_t = per_frame_joint_error(pred, test.future).mean(axis=0)
    by_h = {int(h): float(per_t[h - 1]) for h in horizons}
    report = RunReport(by_h, float(per_t.mean()), config={"backbone": cfg.to_dict(), **(config or {})},
                       seed=seed)
    if stages:
        report.forgetting_matrix = forgetting_matrix(stages)
        report.alpha_trajectory = [e.live_alpha_mean for s in stages for e in s.epochs]
        report.frozen_alphas = [s.alpha_hat for s in stages if s.alpha_hat is not None]
    return report
