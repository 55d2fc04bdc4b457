"""Spatio-temporal graph convolution units and the embedding network."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .graph import (
    PartitionedAdjacency,
    SkeletonLayout,
    build_layout,
    normalized_adjacency,
    num_labels,
    spatial_labels,
)
from .tensor import (
    BatchNormState,
    ShapeError,
    Tensor,
    batch_norm,
    channel_mix,
    global_max_pool,
    make_node,
    no_grad,
    relu,
    temporal_avg_pool,
    temporal_conv,
)
from .tensor import add as _add

DEPTHS = ("shallow", "normal", "deeper")
MIN_SEQUENCE_LENGTH = 4

# (C_in, C_out, stride) per unit
_UNIT_PLANS = {
    "normal": [(3, 64, 1)] + [(64, 64, 1)] * 3 + [(64, 128, 2)] + [(128, 128, 1)] * 2
    + [(128, 256, 2)] + [(256, 256, 1)] * 2,
    "shallow": [(3, 64, 1)] + [(64, 64, 1)] * 2 + [(64, 128, 2)] + [(128, 128, 1)]
    + [(128, 256, 2)] + [(256, 256, 1)],
    "deeper": [(3, 64, 1)] + [(64, 64, 1)] * 3 + [(64, 128, 2)] + [(128, 128, 1)] * 3
    + [(128, 256, 2)] + [(256, 256, 1)] * 3,
}


class SequenceTooShortError(ValueError):
    pass


def unit_plan(depth: str) -> list[tuple[int, int, int]]:
    try:
        return list(_UNIT_PLANS[depth])
    except KeyError:
        raise ValueError(f"unknown depth {depth!r}; expected one of {DEPTHS}") from None


def spatial_graph_conv(x: Tensor, pa: PartitionedAdjacency, weight: Tensor) -> Tensor:
    """Per frame: out[t] = sum_s A_s x[t] W_s^T over the joint axis.

    x [B, C_in, T, N]; ``weight`` [S, C_out, C_in]; returns [B, C_out, T, N].
    """
    if x.ndim != 4 or weight.ndim != 3:
        raise ShapeError(f"spatial_graph_conv got x {x.shape}, weight {weight.shape}")
    s, n = pa.num_labels, pa.num_joints
    if weight.shape[0] != s:
        raise ValueError(f"{weight.shape[0]} weight matrices for {s} partition labels")
    b, c, t, nx = x.shape
    if nx != n:
        raise ShapeError(f"input has {nx} joints, adjacency has {n}")
    if weight.shape[2] != c:
        raise ShapeError(f"weight expects {weight.shape[2]} input channels, got {c}")
    xd, wd = x.data, weight.data
    a = pa.matrices.astype(xd.dtype, copy=False)
    # gather[j, s*N + i] = A_s[i, j]
    gather = a.transpose(2, 0, 1).reshape(n, s * n)
    xa = (xd.reshape(-1, n) @ gather).reshape(b, c, t, s, n)
    out = np.tensordot(xa, wd, axes=([1, 3], [2, 0])).transpose(0, 3, 1, 2)

    def _bw(g):
        gw = np.tensordot(g, xa, axes=([0, 2, 3], [0, 2, 4])).transpose(2, 0, 1)
        gxa = np.tensordot(g, wd, axes=([1], [1]))  # [B, T, N, S, C]
        gxa = np.ascontiguousarray(gxa.transpose(0, 4, 1, 3, 2)).reshape(-1, s * n)
        gx = (gxa @ a.reshape(s * n, n)).reshape(b, c, t, n)
        return gx, np.ascontiguousarray(gw)

    return make_node(np.ascontiguousarray(out), (x, weight), _bw)


def literal_st_conv_reference(
    x: np.ndarray,
    combined_weights: np.ndarray,
    layout: SkeletonLayout,
    partition: str,
    temporal_kernel: int,
) -> np.ndarray:
    """Direct neighbourhood-sum form of the spatio-temporal convolution.

    x [C_in, T, N]; ``combined_weights`` [S * G, C_out, C_in] indexed by
    ``label = spatial_label + S * (q - t + G // 2)``.  Forward only, loops
    over every anchor and every neighbour; kept as a test oracle.
    """
    if temporal_kernel % 2 == 0:
        raise ValueError(f"temporal kernel size must be odd, got {temporal_kernel}")
    x = np.asarray(x, dtype=np.float64)
    c_in, t_len, n = x.shape
    s = num_labels(partition)
    half = temporal_kernel // 2
    if combined_weights.shape[0] != s * temporal_kernel or combined_weights.shape[2] != c_in:
        raise ShapeError(f"combined weights shape {combined_weights.shape} does not fit")
    c_out = combined_weights.shape[1]
    lab = spatial_labels(layout, partition)
    out = np.zeros((c_out, t_len, n))
    for t in range(t_len):
        for i in range(n):
            members = [j for j in range(n) if lab[i, j] >= 0]
            z = {l: sum(1 for k in members if lab[i, k] == l) for l in set(lab[i, members])}
            acc = np.zeros(c_out)
            for q in range(t - half, t + half + 1):
                if not 0 <= q < t_len:
                    continue
                for j in members:
                    label = lab[i, j] + s * (q - t + half)
                    acc += combined_weights[label] @ x[:, q, j] / z[lab[i, j]]
            out[:, t, i] = acc
    return out


@dataclass
class NetworkConfig:
    depth: str = "normal"
    partition: str = "spatial"
    temporal_kernel: int = 9
    layout: str | dict = "coco18"
    embedding_dim: int = 256
    unit_norm: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        unit_plan(self.depth)
        num_labels(self.partition)
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError(f"temporal_kernel must be a positive odd integer, got {self.temporal_kernel}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.embedding_dim != unit_plan(self.depth)[-1][1]:
            raise ValueError("embedding_dim must equal the last unit's channel count (256)")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class StgcnUnit:
    """Spatial graph conv -> BN -> ReLU -> temporal conv -> BN, plus residual, then ReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int, num_labels: int, num_joints: int,
                 temporal_kernel: int, rng: np.random.Generator, residual: bool = True,
                 norm: bool = True, dtype=np.float64):
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.norm = norm
        self.spatial_weight = _uniform(rng, (num_labels, c_out, c_in), c_in * num_labels, dtype)
        self.temporal_weight = _uniform(
            rng, (c_out, c_out, temporal_kernel), c_out * temporal_kernel, dtype
        )
        # a bias in front of batch norm is cancelled by the centring
        self.temporal_bias = None if norm else Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.bn1 = BatchNormState(c_out, num_joints, dtype=dtype) if norm else None
        self.bn2 = BatchNormState(c_out, num_joints, dtype=dtype) if norm else None
        if not residual:
            self.residual = "none"
            self.residual_weight = None
        elif c_in == c_out and stride == 1:
            self.residual = "identity"
            self.residual_weight = None
        else:
            self.residual = "projection"
            self.residual_weight = _uniform(rng, (c_out, c_in), c_in, dtype)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "spatial.weight", self.spatial_weight
        yield "temporal.weight", self.temporal_weight
        if self.temporal_bias is not None:
            yield "temporal.bias", self.temporal_bias
        if self.norm:
            for tag, bn in (("bn1", self.bn1), ("bn2", self.bn2)):
                yield f"{tag}.weight", bn.weight
                yield f"{tag}.bias", bn.bias
        if self.residual_weight is not None:
            yield "residual.weight", self.residual_weight

    def norm_states(self) -> Iterator[tuple[str, BatchNormState]]:
        if self.norm:
            yield "bn1", self.bn1
            yield "bn2", self.bn2

    def forward(self, x: Tensor, pa: PartitionedAdjacency, training: bool = True) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"unit expects {self.c_in} input channels, got {x.shape[1]}")
        h = spatial_graph_conv(x, pa, self.spatial_weight)
        if self.norm:
            h = batch_norm(h, self.bn1, training)
        h = relu(h)
        h = temporal_conv(h, self.temporal_weight, self.temporal_bias, stride=self.stride)
        if self.norm:
            h = batch_norm(h, self.bn2, training)
        if self.residual == "identity":
            h = _add(h, x)
        elif self.residual == "projection":
            h = _add(h, channel_mix(temporal_avg_pool(x, self.stride), self.residual_weight))
        return relu(h)

    __call__ = forward


class GaitNet:
    """Input batch norm, a stack of ST-GCN units, then global max pooling."""

    def __init__(self, config: NetworkConfig, layout: SkeletonLayout | None = None, seed: int = 0):
        self.config = config
        self.layout = build_layout(layout if layout is not None else config.layout)
        self.adjacency = normalized_adjacency(self.layout, config.partition)
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        n = self.layout.num_joints
        s = self.adjacency.num_labels
        self.input_bn = BatchNormState(3, n, dtype=dtype)
        self.units = [
            StgcnUnit(ci, co, st, s, n, config.temporal_kernel, rng,
                      residual=(k > 0), norm=config.unit_norm, dtype=dtype)
            for k, (ci, co, st) in enumerate(unit_plan(config.depth))
        ]

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def channel_trace(self) -> list[int]:
        return [self.units[0].c_in] + [u.c_out for u in self.units]

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        params = OrderedDict()
        params["input_bn.weight"] = self.input_bn.weight
        params["input_bn.bias"] = self.input_bn.bias
        for k, unit in enumerate(self.units):
            for name, p in unit.named_parameters():
                params[f"units.{k}.{name}"] = p
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def norm_states(self) -> "OrderedDict[str, BatchNormState]":
        states = OrderedDict(input_bn=self.input_bn)
        for k, unit in enumerate(self.units):
            for name, st in unit.norm_states():
                states[f"units.{k}.{name}"] = st
        return states

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        bufs = OrderedDict()
        for name, st in self.norm_states().items():
            bufs[f"{name}.running_mean"] = st.running_mean
            bufs[f"{name}.running_var"] = st.running_var
        return bufs

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        owner, _, kind = name.rpartition(".")
        setattr(self.norm_states()[owner], kind, value)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: Tensor | np.ndarray, training: bool = True) -> Tensor:
        """x [B, 3, T, N] -> embeddings [B, 256]."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[3] != self.layout.num_joints:
            raise ShapeError(
                f"expected input [B, 3, T, {self.layout.num_joints}], got {x.shape}"
            )
        if x.shape[2] < MIN_SEQUENCE_LENGTH:
            raise SequenceTooShortError(
                f"sequence has {x.shape[2]} frames; at least {MIN_SEQUENCE_LENGTH} are needed"
            )
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        h = batch_norm(x, self.input_bn, training)
        for unit in self.units:
            h = unit(h, self.adjacency, training)
        return global_max_pool(h)

    __call__ = forward


def build_network(config: NetworkConfig, layout: SkeletonLayout | None = None, seed: int = 0) -> GaitNet:
    return GaitNet(config, layout, seed)


def embed(model: GaitNet, x: np.ndarray | Tensor, training: bool = False) -> np.ndarray:
    """Embed one [3, T, N] (or [1, 3, T, N]) sequence; returns a length-256 vector."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[0] != 1:
        raise ShapeError(f"embed takes a single sequence, got shape {data.shape}")
    with no_grad():
        return model.forward(data, training=training).data[0].copy()
