"""Feed-forward multi-horizon predictor with a per-sample PCF logit head.

The trunk flattens the observed window and runs it through tanh layers.
Two heads read the last trunk feature: one emits all future frames at once
as offsets from the last observed frame, the other emits a single raw logit
that the objective squashes into the prior compensation factor.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamStore

EPS_ALPHA = 1e-4
INITIAL_ALPHA = 0.1


@dataclass
class BackboneConfig:
    J: int = 8
    D: int = 3
    T_h: int = 10
    T_p: int = 25
    hidden_dims: list[int] = field(default_factory=lambda: [128, 128])
    alpha_head_hidden: int = 64
    init_seed: int = 0
    detach_alpha_head: bool = False

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be a non-empty list of positive ints")
        if self.alpha_head_hidden < 1:
            raise ValueError("alpha_head_hidden must be >= 1")
        for name in ("J", "D", "T_h", "T_p"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def in_dim(self) -> int:
        return self.T_h * self.J * self.D

    @property
    def out_dim(self) -> int:
        return self.T_p * self.J * self.D

    def to_dict(self) -> dict:
        return asdict(self)


def param_count(cfg: BackboneConfig) -> int:
    """Closed-form number of scalar weights for ``cfg``."""
    dims = [cfg.in_dim] + cfg.hidden_dims
    trunk = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    H, A = cfg.hidden_dims[-1], cfg.alpha_head_hidden
    pred = H * cfg.out_dim + cfg.out_dim
    head = H * A + A + A + 1
    return trunk + pred + head


def _inverse_squash(alpha: float) -> float:
    s = alpha / (1.0 - EPS_ALPHA)
    return math.log(s / (1.0 - s))


def init_params(cfg: BackboneConfig) -> ParamStore:
    """Fan-in uniform init; prediction layer and alpha output weights start at zero."""
    rng = np.random.default_rng(cfg.init_seed)
    store = ParamStore()
    dims = [cfg.in_dim] + cfg.hidden_dims
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / math.sqrt(a)
        store.add(f"trunk{i}.W", rng.uniform(-bound, bound, size=(a, b)))
        store.add(f"trunk{i}.b", rng.uniform(-bound, bound, size=(b,)))
    H, A = cfg.hidden_dims[-1], cfg.alpha_head_hidden
    store.add("pred.W", np.zeros((H, cfg.out_dim)))
    store.add("pred.b", np.zeros(cfg.out_dim))
    bound = 1.0 / math.sqrt(H)
    store.add("alpha0.W", rng.uniform(-bound, bound, size=(H, A)))
    store.add("alpha0.b", rng.uniform(-bound, bound, size=(A,)))
    store.add("alpha1.W", np.zeros((A, 1)))
    store.add("alpha1.b", np.full(1, _inverse_squash(INITIAL_ALPHA)))
    return store


@dataclass
class PredictionOutput:
    frames: Node  # [B, T_p, J, D]
    alpha_logit: Node  # [B]


def forward(params: ParamStore, history, cfg: BackboneConfig) -> PredictionOutput:
    """Predict all future frames for one ``[T_h, J, D]`` window or a batch of them."""
    hist = np.asarray(history, dtype=np.float64)
    if hist.ndim == 3:
        hist = hist[None]
    expected = (cfg.T_h, cfg.J, cfg.D)
    if hist.ndim != 4 or hist.shape[1:] != expected:
        raise dc.ShapeError(f"history: expected [B, {expected}] or {expected}, got {np.shape(history)}")
    B = hist.shape[0]
    h = dc.constant(hist.reshape(B, -1))
    for i in range(len(cfg.hidden_dims)):
        h = dc.tanh(dc.add_bias(h @ params[f"trunk{i}.W"], params[f"trunk{i}.b"]))

    delta = dc.add_bias(h @ params["pred.W"], params["pred.b"])
    last = np.repeat(hist[:, -1:], cfg.T_p, axis=1).reshape(B, -1)
    frames = dc.reshape(delta + last, (B, cfg.T_p, cfg.J, cfg.D))

    feat = dc.detach(h) if cfg.detach_alpha_head else h
    a = dc.tanh(dc.add_bias(feat @ params["alpha0.W"], params["alpha0.b"]))
    logit = dc.add_bias(a @ params["alpha1.W"], params["alpha1.b"])
    return PredictionOutput(frames, dc.reshape(logit, (B,)))


# --------------------------------------------------------------------------
# checkpoint file:
#   8 bytes magic | uint64 LE header length | UTF-8 JSON header | float64 LE block
# The header's "manifest" lists (name, offset, shape) with offsets in values.
# --------------------------------------------------------------------------

MAGIC = b"TCLCKPT1"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path: str | Path, header: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    manifest, blocks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        manifest.append({"name": name, "offset": offset, "shape": list(a.shape)})
        blocks.append(a.reshape(-1))
        offset += a.size
    header = dict(header, manifest=manifest, total_values=offset)
    raw = json.dumps(header, sort_keys=True).encode()
    body = np.concatenate(blocks) if blocks else np.zeros(0, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(body.astype("<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (n,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16 : 16 + n].decode())
        manifest = header["manifest"]
        total = int(header["total_values"])
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    body = np.frombuffer(data[16 + n :], dtype="<f8")
    if body.size != total:
        raise CheckpointError(f"{path}: expected {total} values, found {body.size}")
    arrays = {}
    for entry in manifest:
        try:
            off, shape = int(entry["offset"]), tuple(int(s) for s in entry["shape"])
            size = int(np.prod(shape)) if shape else 1
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: corrupt manifest entry {entry!r}") from exc
        if off < 0 or off + size > total:
            raise CheckpointError(f"{path}: manifest entry {entry['name']} out of range")
        arrays[entry["name"]] = body[off : off + size].reshape(shape).astype(np.float64)
    return header, arrays
