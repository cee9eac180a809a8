"""Multi-stage training with prior compensation factors.

Stage 1 fits the first segment only. Each later stage keeps the parameters
from the stage before, adds the next segment, and (in ``tcl`` mode) learns
a per-sample PCF from the alpha head. When a stage ends its PCF is averaged
over the training set and frozen for every later stage.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig, forward, read_checkpoint, write_checkpoint
from .diffcore import ParamStore
from .kinsynth import Standardizer, WindowedDataset
from .metrics import predict, segment_errors
from .objective import (
    SegmentSchedule,
    plain_multistage_loss,
    squash_alpha,
    stage1_loss,
    stage_k_loss,
)

log = logging.getLogger(__name__)

MODES = ("tcl", "multistage_no_alpha", "hand_crafted_alpha", "one_stage")


class TrainingDiverged(RuntimeError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    schedule: SegmentSchedule
    mode: str = "tcl"
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # or "sgd" for the plain theta <- theta - lr * grad rule
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    seed: int = 0
    divergence_factor: float = 1e6
    loss_space: str = "raw"  # "raw" (data units) or "standardized"

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate > 0:
            raise TrainConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_space not in ("raw", "standardized"):
            raise TrainConfigError("loss_space must be 'raw' or 'standardized'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sched = d.pop("schedule")
        if "segments" in sched:
            schedule = SegmentSchedule.from_lengths(
                sched["t_h"], sched["segments"], sched["stage_epochs"], sched.get("cumulative", True)
            )
        else:
            schedule = SegmentSchedule(**sched)
        return cls(schedule=schedule, **d)

    def stage_plan(self) -> SegmentSchedule:
        """The schedule actually trained: one_stage collapses to a single segment."""
        if self.mode == "one_stage":
            s = self.schedule
            return SegmentSchedule(s.t_h, [s.boundaries[-1]], [s.total_epochs])
        return self.schedule


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    rule: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(cfg.optimizer, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)


def optimizer_step(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """One in-place update. ``sgd`` is exactly ``theta - lr * grad``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}")
    state.t += 1
    for name, node in params.items():
        g = grads[name]
        if g.shape != node.shape:
            raise dc.ShapeError(f"gradient for {name} has shape {g.shape}, expected {node.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * node.value
        if state.rule == "sgd":
            node.value = node.value - lr * g
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(node.value)
            state.v[name] = np.zeros_like(node.value)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**state.t)
        v_hat = v / (1 - state.beta2**state.t)
        node.value = node.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# --------------------------------------------------------------------------
# PCF helpers
# --------------------------------------------------------------------------

@dataclass
class PcfState:
    live_alpha: float | None = None
    frozen_alphas: list[float] = field(default_factory=list)


def hand_crafted_alpha(stage: int, epoch_in_stage: int) -> float:
    """0.1 at the first epoch of a stage, +0.05 per epoch, capped at 0.5; 1 in stage 1."""
    if stage <= 1:
        return 1.0
    return min(0.1 + 0.05 * epoch_in_stage, 0.5)


def estimate_alpha_hat(
    params: ParamStore, cfg: BackboneConfig, history_std: np.ndarray
) -> float:
    """Mean squashed alpha over every sample in ``history_std``."""
    if len(history_std) == 0:
        raise ValueError("estimate_alpha_hat: no samples")
    _, logits = predict(params, cfg, history_std)
    alphas = [squash_alpha(float(x)) for x in logits]
    return float(sum(alphas) / len(alphas))


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int  # global, 1-based
    stage: int
    train_loss: float
    val_loss: float
    live_alpha_mean: float | None
    task_errors: list[float]


@dataclass
class StageResult:
    stage: int
    alpha_hat: float | None
    epochs: list[EpochRecord] = field(default_factory=list)
    task_errors: list[float] = field(default_factory=list)  # tasks 1..stage at stage end

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "alpha_hat": self.alpha_hat,
            "epochs": [asdict(e) for e in self.epochs],
            "task_errors": list(self.task_errors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageResult":
        return cls(
            d["stage"], d["alpha_hat"], [EpochRecord(**e) for e in d["epochs"]], d["task_errors"]
        )


@dataclass
class TrainingData:
    train: WindowedDataset
    val: WindowedDataset
    norm: Standardizer

    @classmethod
    def from_splits(cls, train: WindowedDataset, val: WindowedDataset) -> "TrainingData":
        return cls(train, val, Standardizer.fit(train))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    pcf: PcfState
    stage: int
    next_epoch: int  # epochs of ``stage`` already completed
    backbone: BackboneConfig
    norm: Standardizer
    train_config: dict
    stages: list[StageResult]
    reference_loss: float | None


def checkpoint(
    path: str | Path,
    params: ParamStore,
    pcf: PcfState,
    stage: int,
    *,
    backbone: BackboneConfig,
    norm: Standardizer,
    optimizer: OptimizerState | None = None,
    next_epoch: int = 0,
    train_config: dict | None = None,
    stages: Sequence[StageResult] = (),
    reference_loss: float | None = None,
) -> None:
    opt = optimizer or OptimizerState()
    arrays = {f"param/{k}": v.value for k, v in params.items()}
    for k in opt.m:
        arrays[f"adam_m/{k}"] = opt.m[k]
        arrays[f"adam_v/{k}"] = opt.v[k]
    header = {
        "format": "tcl-lab-checkpoint/v1",
        "backbone": backbone.to_dict(),
        "normalization": norm.to_dict(),
        "stage": stage,
        "next_epoch": next_epoch,
        "frozen_alphas": list(pcf.frozen_alphas),
        "live_alpha": pcf.live_alpha,
        "optimizer": {
            "rule": opt.rule, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "weight_decay": opt.weight_decay, "t": opt.t,
        },
        "train_config": train_config or {},
        "stages": [s.to_dict() for s in stages],
        "reference_loss": reference_loss,
    }
    write_checkpoint(path, header, arrays)


def restore(path: str | Path, expect: BackboneConfig | None = None) -> Checkpoint:
    header, arrays = read_checkpoint(path)
    try:
        backbone = BackboneConfig(**header["backbone"])
        norm = Standardizer.from_dict(header["normalization"])
        o = header["optimizer"]
    except (KeyError, TypeError) as exc:
        from .backbone import CheckpointError

        raise CheckpointError(f"{path}: incomplete header ({exc})") from exc
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    if expect is not None:
        from .backbone import init_params

        ref = init_params(expect)
        for name, node in ref.items():
            got = params.get(name)
            if got is None or got.shape != node.shape:
                raise dc.ShapeError(
                    f"checkpoint parameter {name}: shape {None if got is None else got.shape} "
                    f"does not match expected {node.shape}"
                )
    opt = OptimizerState(o["rule"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"], o["t"])
    for k, v in arrays.items():
        if k.startswith("adam_m/"):
            opt.m[k[7:]] = v.copy()
        elif k.startswith("adam_v/"):
            opt.v[k[7:]] = v.copy()
    return Checkpoint(
        params,
        opt,
        PcfState(header.get("live_alpha"), list(header["frozen_alphas"])),
        int(header["stage"]),
        int(header["next_epoch"]),
        backbone,
        norm,
        header.get("train_config", {}),
        [StageResult.from_dict(s) for s in header.get("stages", [])],
        header.get("reference_loss"),
    )


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

METRIC_FIELDS = ["epoch", "stage", "train_loss", "val_loss", "live_alpha_mean"]


def _to_loss_space(cfg: TrainConfig, norm: Standardizer, frames: dc.Node, gt: np.ndarray):
    if cfg.loss_space == "standardized":
        return frames, gt
    # raw = std * z + mean; the mean cancels in the residual so only the scale matters
    scale = np.broadcast_to(norm.std, frames.shape).copy()
    return dc.mul(frames, scale), gt * norm.std


def _stage_loss(cfg: TrainConfig, plan: SegmentSchedule, norm: Standardizer, k: int,
                epoch_in_stage: int, out, gt, frozen: Sequence[float]):
    """Returns (loss node, per-sample alpha array or None)."""
    pred, gt = _to_loss_space(cfg, norm, out.frames, gt)
    if k == 1:
        return stage1_loss(pred, gt, plan), None
    if cfg.mode == "multistage_no_alpha":
        return plain_multistage_loss(pred, gt, plan, k), None
    if cfg.mode == "hand_crafted_alpha":
        a = hand_crafted_alpha(k, epoch_in_stage)
        return stage_k_loss(pred, gt, plan, k, a, frozen), np.full(len(gt), a)
    alpha = squash_alpha(out.alpha_logit)
    return stage_k_loss(pred, gt, plan, k, alpha, frozen), alpha.value


class Trainer:
    """Runs the stage plan; can resume from a checkpoint written by itself."""

    def __init__(
        self,
        config: TrainConfig,
        backbone: BackboneConfig,
        data: TrainingData,
        params: ParamStore,
        *,
        checkpoint_dir: str | Path | None = None,
        checkpoint_every: int = 0,
        metrics_path: str | Path | None = None,
    ):
        self.cfg = config
        self.backbone = backbone
        self.data = data
        self.params = params
        self.plan = config.stage_plan()
        for ds in (data.train, data.val):
            if (ds.t_h, ds.t_p) != (backbone.T_h, backbone.T_p):
                raise TrainConfigError(
                    f"{ds.split} windows are T_h={ds.t_h}, T_p={ds.t_p}; "
                    f"backbone expects {backbone.T_h}, {backbone.T_p}"
                )
        try:
            config.schedule.validate_for(backbone.T_h, backbone.T_p)
        except ValueError as exc:
            raise TrainConfigError(str(exc)) from None
        if len(data.train) == 0:
            raise TrainConfigError("empty training split")
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        if self.checkpoint_dir:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        self.checkpoint_every = checkpoint_every
        self.metrics_path = Path(metrics_path) if metrics_path else None

        norm = data.norm
        self.x_train = norm.transform(data.train.history)
        self.y_train = norm.transform(data.train.future)
        self.x_val = norm.transform(data.val.history)
        self.y_val = norm.transform(data.val.future)

        self.opt = OptimizerState.for_config(config)
        self.pcf = PcfState()
        self.stages: list[StageResult] = []
        self.stage = 1
        self.next_epoch = 0
        self.reference_loss: float | None = None

    # -- resume ----------------------------------------------------------
    def load(self, ckpt: Checkpoint) -> None:
        self.params.load_values(ckpt.params)
        self.opt = ckpt.optimizer
        self.pcf = ckpt.pcf
        self.stages = ckpt.stages
        self.stage = ckpt.stage
        self.next_epoch = ckpt.next_epoch
        self.reference_loss = ckpt.reference_loss

    def save(self, path: Path) -> None:
        checkpoint(
            path, self.params, self.pcf, self.stage,
            backbone=self.backbone, norm=self.data.norm, optimizer=self.opt,
            next_epoch=self.next_epoch, train_config=self.cfg.to_dict(),
            stages=self.stages, reference_loss=self.reference_loss,
        )

    # -- evaluation helpers ----------------------------------------------
    def _val_metrics(self, k: int, epoch_in_stage: int) -> tuple[float, list[float]]:
        frames, logits = predict(self.params, self.backbone, self.x_val)
        if len(frames) == 0:
            return float("nan"), []
        out = _Frozen(dc.constant(frames), dc.constant(logits))
        loss, _ = _stage_loss(self.cfg, self.plan, self.data.norm, k, epoch_in_stage, out, self.y_val,
                              self.pcf.frozen_alphas)
        raw_pred = self.data.norm.inverse(frames)
        errs = segment_errors(raw_pred, self.data.val.future, self.plan.lengths)
        return float(loss.value), errs

    def _write_metrics(self, rec: EpochRecord) -> None:
        if self.metrics_path is None:
            return
        fields = METRIC_FIELDS + [f"task_{j}" for j in range(1, self.plan.K + 1)]
        fresh = not self.metrics_path.exists()
        with open(self.metrics_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if fresh:
                w.writerow(fields)
            alpha = "" if rec.live_alpha_mean is None else repr(rec.live_alpha_mean)
            w.writerow([rec.epoch, rec.stage, repr(rec.train_loss), repr(rec.val_loss), alpha]
                       + [repr(e) for e in rec.task_errors])

    # -- main loop -------------------------------------------------------
    def run(self) -> list[StageResult]:
        cfg, plan = self.cfg, self.plan
        N = len(self.x_train)
        while self.stage <= plan.K:
            k = self.stage
            n_epochs = plan.epochs_for_stage(k)
            if self.next_epoch == 0 and (not self.stages or self.stages[-1].stage != k):
                self.stages.append(StageResult(k, None))
                self.reference_loss = None
            result = self.stages[-1]
            for e in range(self.next_epoch, n_epochs):
                order = np.random.default_rng([cfg.seed, k, e]).permutation(N)
                loss_sum, alpha_sum, alpha_n = 0.0, 0.0, 0
                for s in range(0, N, cfg.batch_size):
                    idx = order[s : s + cfg.batch_size]
                    self.params.zero_grad()
                    try:
                        out = forward(self.params, self.x_train[idx], self.backbone)
                        loss, alpha = _stage_loss(cfg, plan, self.data.norm, k, e, out, self.y_train[idx],
                                                  self.pcf.frozen_alphas)
                        dc.backward(loss)
                        grads = {n: p.grad for n, p in self.params.items()}
                        optimizer_step(self.params, grads, self.opt, cfg.learning_rate)
                    except (dc.NonFiniteError, dc.DomainError, TrainingDiverged) as exc:
                        raise TrainingDiverged(f"stage {k}, epoch {e + 1}: {exc}") from exc
                    value = float(loss.value)
                    if self.reference_loss is None:
                        self.reference_loss = max(abs(value), 1e-12)
                    if abs(value) > cfg.divergence_factor * self.reference_loss:
                        raise TrainingDiverged(
                            f"stage {k}, epoch {e + 1}: loss {value:.4g} exceeds "
                            f"{cfg.divergence_factor:g} x initial {self.reference_loss:.4g}"
                        )
                    loss_sum += value * len(idx)
                    if alpha is not None:
                        alpha_sum += float(np.sum(alpha))
                        alpha_n += len(idx)
                val_loss, errs = self._val_metrics(k, e)
                rec = EpochRecord(
                    epoch=self._global_epoch(k, e),
                    stage=k,
                    train_loss=loss_sum / N,
                    val_loss=val_loss,
                    live_alpha_mean=alpha_sum / alpha_n if alpha_n else None,
                    task_errors=errs,
                )
                result.epochs.append(rec)
                self._write_metrics(rec)
                self.next_epoch = e + 1
                if rec.live_alpha_mean is not None:
                    self.pcf.live_alpha = rec.live_alpha_mean
                if self.checkpoint_dir and self.checkpoint_every and (e + 1) % self.checkpoint_every == 0:
                    self.save(self.checkpoint_dir / f"stage{k}_epoch{e + 1}.ckpt")
            self._finish_stage(k, result)
        if self.checkpoint_dir:
            self.save(self.checkpoint_dir / "final.ckpt")
        return self.stages

    def _global_epoch(self, k: int, e: int) -> int:
        return sum(self.plan.epochs_for_stage(j) for j in range(1, k)) + e + 1

    def _finish_stage(self, k: int, result: StageResult) -> None:
        _, errs = self._val_metrics(k, max(self.plan.epochs_for_stage(k) - 1, 0))
        result.task_errors = errs[:k]
        if k >= 2 and self.cfg.mode == "tcl":
            result.alpha_hat = estimate_alpha_hat(self.params, self.backbone, self.x_train)
        elif k >= 2 and self.cfg.mode == "hand_crafted_alpha":
            result.alpha_hat = hand_crafted_alpha(k, max(self.plan.epochs_for_stage(k) - 1, 0))
        if result.alpha_hat is not None:
            self.pcf.frozen_alphas.append(result.alpha_hat)
        self.stage = k + 1
        self.next_epoch = 0
        log.info("stage %d done: task errors %s alpha_hat %s", k, errs[:k], result.alpha_hat)


@dataclass
class _Frozen:
    frames: dc.Node
    alpha_logit: dc.Node


def train(
    config: TrainConfig,
    data: TrainingData,
    params: ParamStore,
    backbone: BackboneConfig,
    **kwargs,
) -> tuple[ParamStore, list[StageResult]]:
    """Run every stage of ``config`` from scratch; returns the trained params and stage log."""
    trainer = Trainer(config, backbone, data, params, **kwargs)
    return params, trainer.run()


def resume(
    path: str | Path,
    data: TrainingData,
    **kwargs,
) -> tuple[ParamStore, list[StageResult]]:
    """Continue a run from a mid-training checkpoint."""
    from .backbone import init_params

    ckpt = restore(path)
    config = TrainConfig.from_dict(ckpt.train_config)
    params = init_params(ckpt.backbone)
    data = TrainingData(data.train, data.val, ckpt.norm)
    trainer = Trainer(config, ckpt.backbone, data, params, **kwargs)
    trainer.load(ckpt)
    return params, trainer.run()
