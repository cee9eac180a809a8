"""Synthetic articulated motion: forward kinematics, windowing, CSV I/O.

Joint angles follow sums of sinusoids plus white noise; coordinates come
from a planar kinematic tree with an optional out-of-plane tilt, so every
bone keeps its configured length exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

AXES = "xyz"


class ConfigError(ValueError):
    pass


class CSVParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree. ``parents[i] < i``; the root (index 0) has parent -1.

    ``bone_lengths[i]`` is the distance from joint ``i`` to its parent; the
    root entry is unused but must still be positive.
    """

    bone_lengths: tuple[float, ...]
    parents: tuple[int, ...]
    rest_angles: tuple[float, ...]
    out_of_plane: float = 0.0

    def __post_init__(self):
        n = len(self.bone_lengths)
        if n < 1:
            raise ConfigError("skeleton needs at least one joint")
        if len(self.parents) != n or len(self.rest_angles) != n:
            raise ConfigError("bone_lengths, parents and rest_angles must have equal length")
        if self.parents[0] != -1:
            raise ConfigError("joint 0 must be the root (parent -1)")
        for i, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < i:
                raise ConfigError(f"parent of joint {i} must be in [0, {i}), got {p}")
        if any(not (b > 0 and math.isfinite(b)) for b in self.bone_lengths):
            raise ConfigError("bone lengths must be finite and strictly positive")

    @property
    def joint_count(self) -> int:
        return len(self.bone_lengths)

    @classmethod
    def chain(cls, bone_lengths: Sequence[float], out_of_plane: float = 0.0) -> "Skeleton":
        n = len(bone_lengths)
        return cls(
            tuple(float(b) for b in bone_lengths),
            (-1,) + tuple(range(n - 1)),
            (0.0,) * n,
            out_of_plane,
        )


def default_skeleton(bone_lengths: Sequence[float] | None = None) -> Skeleton:
    """Eight-joint stick figure: pelvis, spine, head, two arms, one leg."""
    lengths = tuple(bone_lengths) if bone_lengths else (1.0, 0.5, 0.25, 0.3, 0.3, 0.3, 0.3, 0.45)
    if len(lengths) != 8:
        raise ConfigError("default skeleton has 8 joints")
    parents = (-1, 0, 1, 1, 3, 1, 5, 0)
    rest = (math.pi / 2, 0.0, 0.0, 2.2, 0.4, -2.2, -0.4, math.pi)
    return Skeleton(tuple(float(x) for x in lengths), parents, rest, out_of_plane=0.3)


def forward_kinematics(skeleton: Skeleton, joint_angles, dims: int = 3) -> np.ndarray:
    """Map joint angles to coordinates.

    Args:
        skeleton: the kinematic tree.
        joint_angles: ``[J]`` or ``[T, J]`` local angles in radians. The bone
            into joint ``i`` points along the summed angles of all ancestors
            of ``i``; leaf angles have no effect.
        dims: 2 (planar) or 3. In 3-D each bone tilts out of plane by
            ``skeleton.out_of_plane * sin(2 * parent_angle)``.

    Returns:
        ``[J, dims]`` or ``[T, J, dims]`` joint positions, root at the origin.
    """
    angles = np.asarray(joint_angles, dtype=np.float64)
    single = angles.ndim == 1
    if single:
        angles = angles[None, :]
    J = skeleton.joint_count
    if angles.ndim != 2 or angles.shape[1] != J:
        raise ValueError(f"expected {J} angles per frame, got shape {np.shape(joint_angles)}")
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")

    T = angles.shape[0]
    pos = np.zeros((T, J, dims))
    heading = np.zeros((T, J))
    for i in range(1, J):
        p = skeleton.parents[i]
        heading[:, i] = heading[:, p] + angles[:, p]
        L = skeleton.bone_lengths[i]
        if dims == 2:
            step = np.stack([np.cos(heading[:, i]), np.sin(heading[:, i])], axis=-1)
        else:
            tilt = skeleton.out_of_plane * np.sin(2.0 * angles[:, p])
            c = np.cos(tilt)
            step = np.stack(
                [np.cos(heading[:, i]) * c, np.sin(heading[:, i]) * c, np.sin(tilt)], axis=-1
            )
        pos[:, i] = pos[:, p] + L * step
    return pos[0] if single else pos


@dataclass
class PoseSequence:
    frames: np.ndarray  # [T, J, D]
    frame_rate: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be [T>=1, J, D], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("pose sequence contains NaN/Inf")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class GenerationConfig:
    """Everything that determines a synthetic corpus (JSON-serializable)."""

    seed: int = 0
    num_sequences: int = 60
    T: int = 80
    J: int = 8
    D: int = 3
    bone_lengths: list[float] | None = None
    sinusoids_per_joint: int = 2
    freq_range: tuple[float, float] = (0.15, 0.45)
    amp_range: tuple[float, float] = (0.05, 0.35)
    noise_std: float = 0.01
    out_of_plane: float = 0.3
    frame_rate: float = 25.0
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    t_h: int = 10
    t_p: int = 25
    stride: int = 2

    def __post_init__(self):
        self.freq_range = tuple(float(x) for x in self.freq_range)
        self.amp_range = tuple(float(x) for x in self.amp_range)
        self.split_fractions = tuple(float(x) for x in self.split_fractions)
        if self.bone_lengths is not None:
            self.bone_lengths = [float(x) for x in self.bone_lengths]

    def validate(self) -> None:
        if self.T <= 0 or self.num_sequences <= 0:
            raise ConfigError("T and num_sequences must be positive")
        lo, hi = self.amp_range
        # zero amplitude is allowed (rest-pose corpus); negative is not
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid amp_range {self.amp_range}")
        flo, fhi = self.freq_range
        if flo <= 0 or fhi < flo:
            raise ConfigError(f"invalid freq_range {self.freq_range}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.sinusoids_per_joint < 1:
            raise ConfigError("sinusoids_per_joint must be >= 1")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions):
            raise ConfigError("split_fractions must be three non-negative numbers")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must sum to 1")
        if self.T < self.t_h + self.t_p:
            raise ConfigError(f"T={self.T} shorter than t_h + t_p = {self.t_h + self.t_p}")

    def skeleton(self) -> Skeleton:
        if self.J == 8:
            sk = default_skeleton(self.bone_lengths)
            return Skeleton(sk.bone_lengths, sk.parents, sk.rest_angles, self.out_of_plane)
        lengths = self.bone_lengths or [1.0] * self.J
        if len(lengths) != self.J:
            raise ConfigError("bone_lengths must have J entries")
        return Skeleton.chain(lengths, self.out_of_plane)

    @classmethod
    def from_json(cls, path: str | Path) -> "GenerationConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def generate_sequences(
    seed: int,
    num_sequences: int,
    T: int,
    skeleton: Skeleton,
    dynamics: GenerationConfig,
) -> list[PoseSequence]:
    """Draw ``num_sequences`` motions of ``T`` frames; sequence ``i`` depends only on (seed, i)."""
    if T <= 0:
        raise ConfigError("T must be positive")
    lo, hi = dynamics.amp_range
    if lo < 0 or hi < lo:
        raise ConfigError(f"invalid amp_range {dynamics.amp_range}")
    J, S = skeleton.joint_count, dynamics.sinusoids_per_joint
    t = np.arange(T) / dynamics.frame_rate
    rest = np.asarray(skeleton.rest_angles)
    out = []
    for i in range(num_sequences):
        rng = np.random.default_rng([seed, i])
        amp = rng.uniform(lo, hi, size=(J, S))
        freq = rng.uniform(*dynamics.freq_range, size=(J, S))
        phase = rng.uniform(0.0, 2 * np.pi, size=(J, S))
        noise = rng.standard_normal((T, J)) * dynamics.noise_std
        arg = 2 * np.pi * freq[None] * t[:, None, None] + phase[None]
        angles = rest[None, :] + (amp[None] * np.sin(arg)).sum(axis=-1) + noise
        frames = forward_kinematics(skeleton, angles, dims=dynamics.D)
        out.append(PoseSequence(frames, dynamics.frame_rate))
    return out


def split_sequences(
    sequences: Sequence[PoseSequence], fractions: Sequence[float], seed: int
) -> dict[str, list[int]]:
    """Partition sequence indices into disjoint train/val/test sets."""
    n = len(sequences)
    order = np.random.default_rng([seed, 7919]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train : n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val :]),
    }


@dataclass
class WindowedDataset:
    history: np.ndarray  # [N, T_h, J, D]
    future: np.ndarray  # [N, T_p, J, D]
    split: str = "train"
    seed: int = 0
    skipped: int = 0
    source_ids: tuple[int, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return self.history.shape[0]

    @property
    def t_h(self) -> int:
        return self.history.shape[1]

    @property
    def t_p(self) -> int:
        return self.future.shape[1]

    @property
    def joints(self) -> int:
        return self.history.shape[2]

    @property
    def dims(self) -> int:
        return self.history.shape[3]

    @property
    def samples(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.history, self.future))

    def __eq__(self, other) -> bool:
        if not isinstance(other, WindowedDataset):
            return NotImplemented
        return (
            self.split == other.split
            and self.seed == other.seed
            and self.skipped == other.skipped
            and tuple(self.source_ids) == tuple(other.source_ids)
            and self.history.shape == other.history.shape
            and self.future.shape == other.future.shape
            and np.array_equal(self.history, other.history)
            and np.array_equal(self.future, other.future)
        )

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx, dtype=int)
        src = tuple(self.source_ids[i] for i in idx) if self.source_ids else ()
        return WindowedDataset(
            self.history[idx], self.future[idx], self.split, self.seed, 0, src
        )


def window_count(L: int, t_h: int, t_p: int, stride: int) -> int:
    span = t_h + t_p
    return 0 if L < span else (L - span) // stride + 1


def window(
    sequences: Sequence[PoseSequence],
    t_h: int,
    t_p: int,
    stride: int = 1,
    *,
    split: str = "train",
    seed: int = 0,
    source_ids: Sequence[int] | None = None,
) -> WindowedDataset:
    """Cut every sequence into contiguous (history, future) pairs.

    Sequences shorter than ``t_h + t_p`` are skipped and counted in
    ``skipped``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if t_h < 1 or t_p < 1:
        raise ValueError("t_h and t_p must be >= 1")
    ids = list(source_ids) if source_ids is not None else list(range(len(sequences)))
    hist, fut, src = [], [], []
    skipped = 0
    span = t_h + t_p
    shape_jd = None
    for sid, seq in zip(ids, sequences):
        frames = seq.frames
        shape_jd = frames.shape[1:]
        n = window_count(len(frames), t_h, t_p, stride)
        if n == 0:
            skipped += 1
            continue
        for w in range(n):
            s = w * stride
            hist.append(frames[s : s + t_h])
            fut.append(frames[s + t_h : s + span])
            src.append(sid)
    if skipped:
        log.warning("window: skipped %d sequence(s) shorter than %d frames", skipped, span)
    if hist:
        h, f = np.stack(hist), np.stack(fut)
    else:
        J, D = shape_jd if shape_jd is not None else (0, 0)
        h, f = np.zeros((0, t_h, J, D)), np.zeros((0, t_p, J, D))
    return WindowedDataset(h, f, split, seed, skipped, tuple(src))


def build_splits(cfg: GenerationConfig) -> dict[str, WindowedDataset]:
    """Generate, split at the sequence level and window a full corpus."""
    cfg.validate()
    skel = cfg.skeleton()
    seqs = generate_sequences(cfg.seed, cfg.num_sequences, cfg.T, skel, cfg)
    parts = split_sequences(seqs, cfg.split_fractions, cfg.seed)
    return {
        name: window(
            [seqs[i] for i in ids], cfg.t_h, cfg.t_p, cfg.stride,
            split=name, seed=cfg.seed, source_ids=ids,
        )
        for name, ids in parts.items()
    }


@dataclass
class Standardizer:
    """Per-coordinate affine normalization, fitted on the training split."""

    mean: np.ndarray  # [J, D]
    std: np.ndarray  # [J, D]

    @classmethod
    def fit(cls, ds: WindowedDataset) -> "Standardizer":
        frames = np.concatenate([ds.history, ds.future], axis=1)
        flat = frames.reshape(-1, ds.joints, ds.dims)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        # constant coordinates (e.g. the root) would divide by zero
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# --------------------------------------------------------------------------
# CSV: one row per frame -- seq_id, frame_idx, j0_x, j0_y, j0_z, ...
# The first line is a '#'-prefixed JSON object with t_h, t_p, split, seed,
# skipped and source_ids; seq_id is the sample index within the file.
# --------------------------------------------------------------------------

def _columns(J: int, D: int) -> list[str]:
    return ["seq_id", "frame_idx"] + [f"j{j}_{AXES[d]}" for j in range(J) for d in range(D)]


def save_csv(ds: WindowedDataset, path: str | Path) -> None:
    meta = {
        "t_h": ds.t_h,
        "t_p": ds.t_p,
        "joints": ds.joints,
        "dims": ds.dims,
        "split": ds.split,
        "seed": ds.seed,
        "skipped": ds.skipped,
        "source_ids": list(ds.source_ids),
    }
    frames = np.concatenate([ds.history, ds.future], axis=1)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta) + "\n")
        w = csv.writer(fh)
        w.writerow(_columns(ds.joints, ds.dims))
        for n, sample in enumerate(frames):
            for t, frame in enumerate(sample):
                w.writerow([n, t] + [repr(float(v)) for v in frame.reshape(-1)])


def load_csv(path: str | Path) -> WindowedDataset:
    with open(path, newline="") as fh:
        text = fh.read()
    if not text.strip():
        return WindowedDataset(np.zeros((0, 0, 0, 0)), np.zeros((0, 0, 0, 0)))
    lines = text.splitlines()
    if not lines[0].startswith("#"):
        raise CSVParseError("missing '#' metadata line", 1)
    try:
        meta = json.loads(lines[0][1:])
        t_h, t_p = int(meta["t_h"]), int(meta["t_p"])
        J, D = int(meta["joints"]), int(meta["dims"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CSVParseError(f"bad metadata: {exc}", 1) from exc
    reader = csv.reader(lines[1:])
    try:
        header = next(reader)
    except StopIteration:
        raise CSVParseError("missing header row", 2) from None
    if header != _columns(J, D):
        raise CSVParseError("header does not match joints/dims in metadata", 2)
    ncol = len(header)
    span = t_h + t_p
    values: list[list[float]] = []
    for lineno, row in enumerate(reader, start=3):
        if not row:
            continue
        if len(row) != ncol:
            raise CSVParseError(f"expected {ncol} columns, got {len(row)}", lineno)
        try:
            sid, fidx = int(row[0]), int(row[1])
            nums = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise CSVParseError(f"non-numeric field ({exc})", lineno) from None
        k = len(values)
        if sid != k // span or fidx != k % span:
            raise CSVParseError(f"unexpected (seq_id, frame_idx) = ({sid}, {fidx})", lineno)
        if not all(math.isfinite(v) for v in nums):
            raise CSVParseError("non-finite value", lineno)
        values.append(nums)
    if len(values) % span:
        raise CSVParseError("incomplete final sample", len(lines))
    arr = np.asarray(values, dtype=np.float64).reshape(-1, span, J, D)
    return WindowedDataset(
        arr[:, :t_h].copy(),
        arr[:, t_h:].copy(),
        meta.get("split", "train"),
        int(meta.get("seed", 0)),
        int(meta.get("skipped", 0)),
        tuple(int(i) for i in meta.get("source_ids", [])),
    )
