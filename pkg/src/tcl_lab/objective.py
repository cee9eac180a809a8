"""Segment losses, the prior-compensation stage loss and the bound checks.

Frames are indexed absolutely: the observed window is ``1..T_h`` and the
prediction covers ``T_h+1..T_h+T_p``. Segment ``k`` spans
``boundaries[k-2]+1 .. boundaries[k-1]`` (with ``boundaries[-1] == T_h``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .backbone import EPS_ALPHA
from .diffcore import Node

LOG_3_2 = math.log(1.5)

# segment lengths 3 / 9 / 13 over a 25-frame horizon, 50 / 90 / 120 cumulative epochs
REFERENCE_SEGMENTS = (3, 9, 13)
REFERENCE_EPOCHS = (50, 90, 120)


@dataclass
class SegmentSchedule:
    """Absolute segment end frames plus per-stage epoch budgets.

    ``stage_epochs`` are cumulative by default (stage ``k`` trains for
    ``E_k - E_{k-1}`` epochs); set ``cumulative=False`` to read them as
    per-stage counts.
    """

    t_h: int
    boundaries: list[int]
    stage_epochs: list[int]
    cumulative: bool = True

    def __post_init__(self):
        self.boundaries = [int(b) for b in self.boundaries]
        self.stage_epochs = [int(e) for e in self.stage_epochs]
        if not self.boundaries:
            raise ValueError("schedule needs at least one segment")
        if len(self.stage_epochs) != len(self.boundaries):
            raise ValueError("need one epoch budget per segment")
        prev = self.t_h
        for b in self.boundaries:
            if b <= prev:
                raise ValueError(f"boundaries must be strictly increasing and > T_h: {self.boundaries}")
            prev = b
        if self.cumulative:
            if any(b < a for a, b in zip(self.stage_epochs, self.stage_epochs[1:])):
                raise ValueError("cumulative stage_epochs must be non-decreasing")
        if any(e < 0 for e in self.stage_epochs):
            raise ValueError("stage_epochs must be non-negative")

    @classmethod
    def from_lengths(
        cls, t_h: int, lengths: Sequence[int], stage_epochs: Sequence[int], cumulative: bool = True
    ) -> "SegmentSchedule":
        return cls(t_h, list(t_h + np.cumsum(lengths)), list(stage_epochs), cumulative)

    @property
    def K(self) -> int:
        return len(self.boundaries)

    @property
    def t_p(self) -> int:
        return self.boundaries[-1] - self.t_h

    @property
    def lengths(self) -> list[int]:
        edges = [self.t_h] + self.boundaries
        return [b - a for a, b in zip(edges[:-1], edges[1:])]

    def segment(self, k: int) -> tuple[int, int]:
        """Inclusive absolute frame range of task ``k`` (1-based)."""
        if not 1 <= k <= self.K:
            raise ValueError(f"task index {k} outside 1..{self.K}")
        start = self.t_h if k == 1 else self.boundaries[k - 2]
        return start + 1, self.boundaries[k - 1]

    def epochs_for_stage(self, k: int) -> int:
        if not self.cumulative:
            return self.stage_epochs[k - 1]
        prev = self.stage_epochs[k - 2] if k > 1 else 0
        return self.stage_epochs[k - 1] - prev

    @property
    def total_epochs(self) -> int:
        return self.stage_epochs[-1] if self.cumulative else sum(self.stage_epochs)

    def validate_for(self, t_h: int, t_p: int) -> None:
        if self.t_h != t_h or self.boundaries[-1] != t_h + t_p:
            raise ValueError(
                f"schedule covers frames {self.t_h + 1}..{self.boundaries[-1]}, "
                f"data has T_h={t_h}, T_p={t_p}"
            )

    def to_dict(self) -> dict:
        return {
            "t_h": self.t_h,
            "boundaries": list(self.boundaries),
            "stage_epochs": list(self.stage_epochs),
            "cumulative": self.cumulative,
        }


def default_segments(t_p: int, K: int) -> list[int]:
    """Segment lengths for a ``K``-task split of ``t_p`` frames.

    Uses 3/9/13 for the standard 25-frame, 3-task case; otherwise segment
    ends grow quadratically so early tasks stay short.
    """
    if K < 1 or K > t_p:
        raise ValueError(f"cannot split {t_p} frames into {K} tasks")
    if (t_p, K) == (sum(REFERENCE_SEGMENTS), len(REFERENCE_SEGMENTS)):
        return list(REFERENCE_SEGMENTS)
    ends = []
    for k in range(1, K + 1):
        e = max(int(round(t_p * (k / K) ** 2)), (ends[-1] + 1) if ends else 1)
        ends.append(e)
    # keep room for the remaining tasks, then pin the last end to t_p
    for i in range(K - 1, -1, -1):
        cap = t_p - (K - 1 - i)
        ends[i] = min(ends[i], cap)
        if i < K - 1 and ends[i] >= ends[i + 1]:
            ends[i] = ends[i + 1] - 1
    ends[-1] = t_p
    return [b - a for a, b in zip([0] + ends[:-1], ends)]


def default_epochs(K: int, total: int = REFERENCE_EPOCHS[-1]) -> list[int]:
    """Cumulative epoch budgets: 50/90/120 for three stages, else 5/12 first then even."""
    if K == len(REFERENCE_EPOCHS) and total == REFERENCE_EPOCHS[-1]:
        return list(REFERENCE_EPOCHS)
    if K == 1:
        return [total]
    first = int(round(total * 5 / 12))
    return [first + int(round((total - first) * j / (K - 1))) for j in range(K)]


# --------------------------------------------------------------------------
# squashing
# --------------------------------------------------------------------------

def squash_alpha(logit):
    """(1 - eps) * sigmoid(logit); Node in, Node out, float in, float out."""
    if isinstance(logit, Node):
        return dc.scale(dc.sigmoid(logit), 1.0 - EPS_ALPHA)
    x = float(logit)
    s = 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))
    return (1.0 - EPS_ALPHA) * s


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _batched(x) -> Node:
    node = x if isinstance(x, Node) else dc.constant(x)
    if node.value.ndim == 3:
        node = dc.reshape(node, (1,) + node.shape)
    return node


def segment_sq_error(pred, gt, from_frame: int, to_frame: int, t_h: int) -> Node:
    """Per-sample sum over frames ``from..to`` of squared L2 error, shape [B]."""
    pred = _batched(pred)
    gt_arr = np.asarray(gt.value if isinstance(gt, Node) else gt, dtype=np.float64)
    if gt_arr.ndim == 3:
        gt_arr = gt_arr[None]
    if pred.shape != gt_arr.shape:
        raise dc.ShapeError(f"pred {pred.shape} vs gt {gt_arr.shape}")
    t_p = pred.shape[1]
    if from_frame > to_frame:
        raise ValueError(f"empty frame range {from_frame}..{to_frame}")
    if not (t_h < from_frame and to_frame <= t_h + t_p):
        raise ValueError(f"frame range {from_frame}..{to_frame} outside {t_h + 1}..{t_h + t_p}")
    lo, hi = from_frame - t_h - 1, to_frame - t_h
    diff = pred[:, lo:hi] - gt_arr[:, lo:hi]
    B = pred.shape[0]
    return dc.sum_(dc.reshape(dc.square(diff), (B, -1)), axis=1)


def segment_mse(pred, gt, from_frame: int, to_frame: int, t_h: int) -> Node:
    """Sum over frames of squared error, averaged over the batch."""
    return dc.mean(segment_sq_error(pred, gt, from_frame, to_frame, t_h))


def stage1_loss(pred, gt, schedule: SegmentSchedule) -> Node:
    lo, hi = schedule.segment(1)
    return segment_mse(pred, gt, lo, hi, schedule.t_h)


def alpha_regularizer(alpha):
    """(1 - a) log(1 - a) + log(1 + a); Node or float."""
    if isinstance(alpha, Node):
        one_minus = 1.0 - alpha
        return one_minus * dc.log(one_minus) + dc.log(1.0 + alpha)
    a = float(alpha)
    return (1 - a) * math.log(1 - a) + math.log(1 + a) if a < 1 else math.log(2.0)


def alpha_regularizer_grad(alpha: float) -> float:
    """d/da of the regularizer: -log(1 - a) - 1 + 1 / (1 + a)."""
    return -math.log(1.0 - alpha) - 1.0 + 1.0 / (1.0 + alpha)


def _check_alpha_range(alpha, what: str) -> None:
    vals = np.asarray(alpha.value if isinstance(alpha, Node) else alpha, dtype=np.float64)
    if np.any(vals < 0) or np.any(vals >= 1.0):
        raise ValueError(f"{what} must lie in [0, 1), got {vals}")


def stage_k_loss(
    pred,
    gt,
    schedule: SegmentSchedule,
    k: int,
    live_alpha,
    frozen_alphas: Sequence[float],
) -> Node:
    """Stage-``k`` loss with a live PCF for the newest segment.

    ``(1-a) m_k + (1-a) log(1-a) + log(1+a) + sum_j (1 - a_j) m_j + m_1``
    where ``m_j`` is the per-sample squared error of segment ``j``, ``a`` is
    the live (per-sample or scalar) alpha and ``a_j`` are the frozen
    estimates of stages ``2..k-1``. Every term is averaged over the batch.
    """
    if not 2 <= k <= schedule.K:
        raise ValueError(f"stage index {k} outside 2..{schedule.K}")
    if len(frozen_alphas) != k - 2:
        raise ValueError(f"stage {k} needs {k - 2} frozen alphas, got {len(frozen_alphas)}")
    _check_alpha_range(live_alpha, "live_alpha")
    for a in frozen_alphas:
        _check_alpha_range(a, "frozen alpha")
    t_h = schedule.t_h
    m = [segment_sq_error(pred, gt, *schedule.segment(j), t_h) for j in range(1, k + 1)]

    alpha = live_alpha if isinstance(live_alpha, Node) else dc.constant(float(live_alpha))
    one_minus = 1.0 - alpha
    current = one_minus * m[k - 1] + one_minus * dc.log(one_minus) + dc.log(1.0 + alpha)
    total = dc.mean(current)
    for j in range(2, k):
        total = total + dc.scale(dc.mean(m[j - 1]), 1.0 - float(frozen_alphas[j - 2]))
    return total + dc.mean(m[0])


def plain_multistage_loss(pred, gt, schedule: SegmentSchedule, k: int) -> Node:
    """Unweighted sum of segment MSEs for tasks ``1..k``."""
    total = None
    for j in range(1, k + 1):
        term = segment_mse(pred, gt, *schedule.segment(j), schedule.t_h)
        total = term if total is None else total + term
    return total


# --------------------------------------------------------------------------
# bound verification on the (a, b) probability domain
# --------------------------------------------------------------------------

def _gap(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    one_minus = 1.0 - a
    # (1-a) log(1-a) -> 0 as a -> 1
    xlogx = np.where(one_minus > 0, one_minus * np.log(np.where(one_minus > 0, one_minus, 1.0)), 0.0)
    upper = one_minus * (-np.log(b)) + xlogx + np.log1p(a)
    return upper - (-np.log(a + b))


def lemma31_gap(a: float, b: float) -> float:
    """Upper-bound term minus ``-log(a + b)``; non-negative on the valid domain."""
    if not (0 < b <= 1) or not (0 <= a <= 1 - b):
        raise ValueError(f"(a, b) = ({a}, {b}) outside 0 <= a <= 1-b, 0 < b <= 1")
    return float(_gap(a, b))


def gap_grid(resolution: int, b_min: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate the gap on a ``resolution x resolution`` grid of the valid domain.

    Rows index b, columns index a in ``[0, 1 - b]`` (endpoints included).
    With ``b_min=None`` b runs over ``1/n, 2/n, ..., 1``; otherwise over
    ``linspace(b_min, 1, n)``.
    """
    n = int(resolution)
    if n < 2:
        raise ValueError("resolution must be >= 2")
    if b_min is None:
        b = np.arange(1, n + 1) / n
    else:
        b = np.linspace(b_min, 1.0, n)
    frac = np.arange(n) / (n - 1)
    a = (1.0 - b)[:, None] * frac[None, :]
    bb = np.broadcast_to(b[:, None], a.shape)
    return a, bb, _gap(a, bb)


@dataclass
class LemmaReport:
    resolution: int
    min_gap: float
    max_gap_zero_line: float
    max_gap_restricted: float
    argmax_restricted: tuple[float, float]
    stage_bounds: dict[int, float]
    lemma31_ok: bool
    lemma32_ok: bool
    tolerances: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.lemma31_ok and self.lemma32_ok

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "lemma31": {
                "min_gap": self.min_gap,
                "max_abs_gap_on_a0": self.max_gap_zero_line,
                "pass": self.lemma31_ok,
            },
            "lemma32": {
                "max_gap": self.max_gap_restricted,
                "argmax": {"a": self.argmax_restricted[0], "b": self.argmax_restricted[1]},
                "log_3_2": LOG_3_2,
                "stage_bounds": {str(k): v for k, v in self.stage_bounds.items()},
                "pass": self.lemma32_ok,
            },
            "tolerances": self.tolerances,
            "pass": self.passed,
        }


def lemma31_check(resolution: int = 1000, tol: float = 1e-12) -> tuple[bool, float, float]:
    """Returns (ok, min gap, max |gap| on the a=0 column)."""
    a, b, g = gap_grid(resolution)
    zero_line = float(np.abs(g[:, 0]).max())
    lowest = float(g.min())
    return lowest >= -tol and zero_line <= tol, lowest, zero_line


def lemma32_check(resolution: int = 1000, K: int = 3, tol: float = 1e-9) -> LemmaReport:
    """Grid-verify both bounds and report the k-stage gap bound for k = 2..K."""
    ok31, lowest, zero_line = lemma31_check(resolution)
    a, b, g = gap_grid(resolution, b_min=0.5)
    idx = np.unravel_index(int(np.argmax(g)), g.shape)
    top = float(g[idx])
    arg = (float(a[idx]), float(b[idx]))
    step = 0.5 / (resolution - 1)
    located = abs(arg[0] - 0.5) <= step + 1e-12 and abs(arg[1] - 0.5) <= step + 1e-12
    ok32 = top <= LOG_3_2 + 1e-12 and abs(top - LOG_3_2) <= tol and located
    bounds = {k: LOG_3_2 * (k - 1) for k in range(2, K + 1)}
    return LemmaReport(
        resolution, lowest, zero_line, top, arg, bounds, ok31, ok32,
        {"lemma31_nonneg": 1e-12, "lemma32_max": tol},
    )


def write_lemma_report(report: LemmaReport, out_dir: str | Path, write_grid: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "lemma_summary.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    if write_grid:
        a, b, g = gap_grid(report.resolution)
        table = np.column_stack([a.reshape(-1), b.reshape(-1), g.reshape(-1)])
        with open(out / "lemma_grid.csv", "w", newline="") as fh:
            fh.write("a,b,gap\n")
            np.savetxt(fh, table, delimiter=",", fmt="%.17g")
