"""P x K batch sampling, Adam, the training loop and binary checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SkeletonSequence, normalize_sequence
from .graph import build_layout
from .metric import batch_hard_loss
from .nn import GaitNet, MIN_SEQUENCE_LENGTH, NetworkConfig, build_network
from .tensor import NonFiniteError, backward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SKGCKPT\x00"
CHECKPOINT_END = b"END\x00"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class SamplerError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    P: int = 8
    K: int = 4
    margin: float = 0.2
    learning_rate: float = 1e-3
    epochs: int = 10
    steps_per_epoch: int | None = None  # None -> ceil(#train sequences / (P*K))
    crop_length: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    fixed_batch: bool = False

    def __post_init__(self):
        if self.P < 2:
            raise ValueError("P (identities per batch) must be at least 2")
        if self.K < 2:
            raise ValueError("K (samples per identity) must be at least 2")
        if self.crop_length < MIN_SEQUENCE_LENGTH:
            raise ValueError(f"crop_length must be at least {MIN_SEQUENCE_LENGTH}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- sampling


def crop_sequence(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random temporal crop of x [3, T, N]; short sequences are repeated cyclically."""
    t = x.shape[1]
    start = int(rng.integers(0, t - length + 1)) if t >= length else int(rng.integers(0, t))
    idx = (start + np.arange(length)) % t
    return x[:, idx]


def group_by_identity(items: Sequence[tuple[np.ndarray, str]]) -> "OrderedDict[str, list[np.ndarray]]":
    groups: OrderedDict[str, list[np.ndarray]] = OrderedDict()
    for x, label in items:
        groups.setdefault(str(label), []).append(x)
    return OrderedDict(sorted(groups.items()))


def sample_pk_batch(groups: "OrderedDict[str, list[np.ndarray]]", P: int, K: int,
                    crop_length: int, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """P identities without replacement, K crops each; returns ([P*K, 3, L, N], labels)."""
    ids = list(groups)
    if len(ids) < P:
        raise SamplerError(f"batch needs {P} identities, only {len(ids)} available")
    chosen = rng.choice(len(ids), size=P, replace=False)
    batch, labels = [], []
    for k in chosen:
        pid = ids[k]
        pool = groups[pid]
        if not pool:
            raise SamplerError(f"identity {pid} has no sequences")
        picks = rng.choice(len(pool), size=K, replace=len(pool) < K)
        for j in picks:
            batch.append(crop_sequence(pool[j], crop_length, rng))
            labels.append(pid)
    return np.stack(batch), labels


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to the arrays in ``params``."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, parameter {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {state.m[name].shape}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------- training


def prepare_inputs(sequences: Sequence[SkeletonSequence], layout, dtype=np.float64) -> list[np.ndarray]:
    layout = build_layout(layout)
    return [normalize_sequence(s, layout).to_network_input().astype(dtype) for s in sequences]


@dataclass
class TrainResult:
    model: GaitNet
    optimizer: AdamState
    losses: list[float]
    checkpoint_path: Path | None = None


def train(train_set: Sequence[SkeletonSequence], cfg: TrainConfig,
          net_cfg: NetworkConfig | None = None, checkpoint_dir: str | Path | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Batch-hard triplet training; everything random derives from ``cfg.seed``."""
    net_cfg = net_cfg or NetworkConfig()
    model = build_network(net_cfg, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    inputs = prepare_inputs(train_set, model.layout, model.dtype)
    groups = group_by_identity(list(zip(inputs, (s.identity for s in train_set))))
    if len(groups) < cfg.P:
        raise SamplerError(f"batch needs {cfg.P} identities, training set has {len(groups)}")
    steps_per_epoch = cfg.steps_per_epoch or math.ceil(len(inputs) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = AdamState()
    params = model.named_parameters()
    losses: list[float] = []
    ckpt_path = None
    fixed = None
    for step in range(1, total + 1):
        if cfg.fixed_batch:
            if fixed is None:
                fixed = sample_pk_batch(groups, cfg.P, cfg.K, cfg.crop_length, rng)
            batch, labels = fixed
        else:
            batch, labels = sample_pk_batch(groups, cfg.P, cfg.K, cfg.crop_length, rng)
        model.zero_grad()
        emb = model.forward(batch, training=True)
        loss, _ = batch_hard_loss(emb, labels, cfg.margin)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value} at step {step}")
        try:
            backward(loss, params.values())
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"step {step}: {exc}") from None
        adam_step({k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items()},
                  opt, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if checkpoint_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            ckpt_path = Path(checkpoint_dir) / f"step{step:06d}.skg"
            save_checkpoint(model, ckpt_path, opt, cfg)
    if checkpoint_dir is not None:
        ckpt_path = Path(checkpoint_dir) / "final.skg"
        save_checkpoint(model, ckpt_path, opt, cfg)
    return TrainResult(model, opt, losses, ckpt_path)


def format_loss_trace(losses: Sequence[float]) -> str:
    return "".join(f"{k},{v!r}\n" for k, v in enumerate(losses, start=1))


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: dict
    step: int
    params: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]"
    optimizer: AdamState
    version: int = CHECKPOINT_VERSION

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(**self.config["network"])


def _write_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = arr.dtype.itemsize
    if arr.dtype.kind != "f" or code not in _DTYPE_CODES:
        raise CheckpointError(f"cannot store {name} with dtype {arr.dtype}")
    raw = name.encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BI", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def save_checkpoint(model: GaitNet, path: str | Path, optimizer: AdamState | None = None,
                    train_config: TrainConfig | None = None) -> Path:
    """Versioned header, config echo, then one record per tensor; written atomically."""
    path = Path(path)
    optimizer = optimizer or AdamState()
    config = {
        "network": model.config.to_dict(),
        "layout": model.layout.to_dict(),
        "train": train_config.to_dict() if train_config else None,
    }
    records: list[tuple[str, np.ndarray]] = []
    records += [(f"param/{k}", p.data) for k, p in model.named_parameters().items()]
    records += [(f"buffer/{k}", b) for k, b in model.named_buffers().items()]
    records += [(f"adam.m/{k}", a) for k, a in optimizer.m.items()]
    records += [(f"adam.v/{k}", a) for k, a in optimizer.v.items()]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg_raw = json.dumps(config, sort_keys=True).encode()
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_raw)))
    buf.write(cfg_raw)
    buf.write(struct.pack("<QI", optimizer.step, len(records)))
    for name, arr in records:
        _write_record(buf, name, arr)
    buf.write(CHECKPOINT_END)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(raw, path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, cfg_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        config = json.loads(r.take(cfg_len))
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt config block") from None
    step, count = r.unpack("<QI")
    params, buffers = OrderedDict(), OrderedDict()
    opt = AdamState(step=step)
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode()
        code, rank = r.unpack("<BI")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{rank}I")
        dt = _DTYPE_CODES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        kind, _, key = name.partition("/")
        {"param": params, "buffer": buffers, "adam.m": opt.m, "adam.v": opt.v}.get(
            kind, {}
        )[key] = arr
    if r.take(len(CHECKPOINT_END)) != CHECKPOINT_END or r.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes or missing end marker")
    return Checkpoint(config, step, params, buffers, opt, version)


def restore_model(ckpt: Checkpoint, net_cfg: NetworkConfig | None = None) -> GaitNet:
    """Build a model for ``net_cfg`` (default: the stored config) and load the checkpoint into it."""
    net_cfg = net_cfg or ckpt.network_config()
    layout = ckpt.config.get("layout") or net_cfg.layout
    model = build_network(net_cfg, build_layout(layout))
    expected = model.named_parameters()
    for name, p in expected.items():
        if name not in ckpt.params:
            raise CheckpointError(f"checkpoint lacks tensor {name!r} required by the configured network")
        stored = ckpt.params[name]
        if stored.shape != p.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {stored.shape} in the checkpoint, network expects {p.shape}"
            )
    extra = [k for k in ckpt.params if k not in expected]
    if extra:
        raise CheckpointError(f"checkpoint tensor {extra[0]!r} has no place in the configured network")
    for name, p in expected.items():
        p.data = ckpt.params[name].astype(model.dtype, copy=True)
    for name, cur in model.named_buffers().items():
        stored = ckpt.buffers.get(name)
        if stored is None or stored.shape != cur.shape:
            raise CheckpointError(f"buffer {name!r} missing or mis-shaped in the checkpoint")
        model.set_buffer(name, stored.astype(model.dtype, copy=True))
    return model
