"""The DiM noise-prediction network.

Pipeline for a batch of noisy clouds: voxelize -> patchify -> prepend
[time, class] tokens -> bidirectional selective-scan blocks -> final norm ->
linear head on patch tokens -> depatchify -> devoxelize at the input points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Stream
from .ssm import SelectiveParams, selective_scan
from .tensor import Tensor
from .voxel import PATCH_SIZES, depatchify, devoxelize, num_tokens, patchify, voxelize

# (layers, hidden width) per size tag
SIZES = {"S": (16, 384), "B": (16, 768), "L": (32, 1024), "XL": (36, 1152)}
CUSTOM = "custom"
TIME_FEATURES = 128
COND_TOKENS = 2
INIT_STD = 0.02
DT_MIN, DT_MAX = 1e-3, 1e-1


@dataclass
class DiMConfig:
    layers: int
    hidden: int
    patch: int = 4
    voxel: int = 32
    state_size: int = 16
    expand: int = 2
    conv_width: int = 4
    num_classes: int = 1
    size_tag: str = CUSTOM

    def __post_init__(self):
        if self.size_tag in SIZES:
            if (self.layers, self.hidden) != SIZES[self.size_tag]:
                raise ValueError(f"size {self.size_tag} requires layers/hidden {SIZES[self.size_tag]}")
        elif self.size_tag != CUSTOM:
            raise ValueError(f"unknown size tag {self.size_tag!r}; expected one of {sorted(SIZES)} or {CUSTOM!r}")
        if self.patch not in PATCH_SIZES or self.voxel % self.patch:
            raise ValueError(f"patch {self.patch} must be in {PATCH_SIZES} and divide voxel {self.voxel}")
        if min(self.layers, self.hidden, self.state_size, self.expand, self.conv_width) < 1:
            raise ValueError("model dimensions must be positive")
        if not 1 <= self.num_classes <= 55:
            raise ValueError("num_classes must be in [1, 55]")

    @classmethod
    def from_size(cls, tag: str, **kw) -> DiMConfig:
        layers, hidden = SIZES[tag]
        return cls(layers=layers, hidden=hidden, size_tag=tag, **kw)

    @property
    def inner(self) -> int:
        return self.expand * self.hidden

    @property
    def tokens(self) -> int:
        return num_tokens(self.voxel, self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch**3 * 3


@dataclass
class DirectionParams:
    conv: Tensor       # [E, k]
    w_delta: Tensor    # [E, 1]
    b_delta: Tensor    # [E]
    W_B: Tensor        # [E, N]
    W_C: Tensor        # [E, N]
    A_log: Tensor      # [E, N]
    D: Tensor          # [E]


@dataclass
class BlockParams:
    norm_g: Tensor
    norm_b: Tensor
    W_z: Tensor
    W_v: Tensor
    fwd: DirectionParams
    bwd: DirectionParams
    W_out: Tensor


@dataclass
class ModelParams:
    W_embed: Tensor
    pos: Tensor
    time_w1: Tensor
    time_b1: Tensor
    time_w2: Tensor
    time_b2: Tensor
    class_table: Tensor   # [M + 1, D]; last row is the null class
    blocks: list[BlockParams] = field(default_factory=list)
    norm_g: Tensor | None = None
    norm_b: Tensor | None = None
    W_head: Tensor | None = None


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Every learnable tensor with a stable dotted name, in a fixed order."""
    out = [(n, getattr(params, n)) for n in
           ("W_embed", "pos", "time_w1", "time_b1", "time_w2", "time_b2", "class_table")]
    for i, bp in enumerate(params.blocks):
        for n in ("norm_g", "norm_b", "W_z", "W_v"):
            out.append((f"blocks.{i}.{n}", getattr(bp, n)))
        for d in ("fwd", "bwd"):
            dp = getattr(bp, d)
            for n in ("conv", "w_delta", "b_delta", "W_B", "W_C", "A_log", "D"):
                out.append((f"blocks.{i}.{d}.{n}", getattr(dp, n)))
        out.append((f"blocks.{i}.W_out", bp.W_out))
    out += [("norm_g", params.norm_g), ("norm_b", params.norm_b), ("W_head", params.W_head)]
    return out


def allocate_params(cfg: DiMConfig) -> ModelParams:
    """Zero-filled parameter structure for ``cfg``."""
    D, E, N, k = cfg.hidden, cfg.inner, cfg.state_size, cfg.conv_width

    def z(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def direction():
        return DirectionParams(z(E, k), z(E, 1), z(E), z(E, N), z(E, N), z(E, N), z(E))

    blocks = [BlockParams(z(D), z(D), z(D, E), z(D, E), direction(), direction(), z(E, D))
              for _ in range(cfg.layers)]
    return ModelParams(
        W_embed=z(cfg.patch_dim, D), pos=z(cfg.tokens, D),
        time_w1=z(TIME_FEATURES, D), time_b1=z(D), time_w2=z(D, D), time_b2=z(D),
        class_table=z(cfg.num_classes + 1, D), blocks=blocks,
        norm_g=z(D), norm_b=z(D), W_head=z(D, cfg.patch_dim))


def init_params(cfg: DiMConfig, seed: int) -> ModelParams:
    """Gaussian(0.02) projections, zero biases, zero W_out and W_head.

    A_log rows make -exp(A_log) span -1 .. -N; the delta bias is the inverse
    softplus of a log-uniform draw in [1e-3, 1e-1].
    """
    params = allocate_params(cfg)
    N = cfg.state_size
    for name, t in named_parameters(params):
        leaf = name.rsplit(".", 1)[-1]
        rng = Stream(seed, "init." + name)
        if leaf in ("norm_g", "D"):
            t.data[...] = 1.0
        elif leaf == "A_log":
            t.data[...] = np.log(np.arange(1, N + 1, dtype=np.float64))
        elif leaf == "b_delta":
            dt = np.exp(rng.uniform(math.log(DT_MIN), math.log(DT_MAX), t.shape))
            t.data[...] = dt + np.log(-np.expm1(-dt))
        elif leaf in ("norm_b", "time_b1", "time_b2", "W_out", "W_head"):
            pass
        else:
            t.data[...] = INIT_STD * rng.normal(t.shape)
    return params


def param_count(cfg: DiMConfig) -> int:
    """Closed-form scalar parameter count.

    per block:  2D (norm) + 3DE (W_z, W_v, W_out)
                + 2 directions * E (k conv taps + 2 delta head + 1 skip + 3N for W_B, W_C, A_log)
    model:      patch embed Pd*D + positions L*D + time MLP (128D + D + D^2 + D)
                + class table (M+1)D + final norm 2D + head D*Pd
    """
    D, E, N, k = cfg.hidden, cfg.inner, cfg.state_size, cfg.conv_width
    Pd, L, M = cfg.patch_dim, cfg.tokens, cfg.num_classes
    block = 2 * D + 3 * D * E + 2 * E * (k + 3 + 3 * N)
    return (cfg.layers * block + Pd * D + L * D + TIME_FEATURES * D + 2 * D + D * D
            + (M + 1) * D + 2 * D + D * Pd)


def sinusoidal_features(t) -> np.ndarray:
    """[..., 128] with sin/cos interleaved at frequencies 10000^(-2i/128)."""
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * np.arange(TIME_FEATURES // 2) / TIME_FEATURES)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (TIME_FEATURES,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def time_embed(t, params: ModelParams, steps: int = 1000) -> Tensor:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= steps):
        raise ValueError(f"timestep out of range [0, {steps})")
    h = T.matmul(Tensor(sinusoidal_features(t)), params.time_w1) + params.time_b1
    return T.matmul(T.silu(h), params.time_w2) + params.time_b2


def _direction(c_in: Tensor, dp: DirectionParams) -> Tensor:
    c = T.silu(T.conv1d_depthwise(c_in, dp.conv))
    delta = T.softplus(T.matmul(c, dp.w_delta) + dp.b_delta)
    p = SelectiveParams(delta=delta, B=T.matmul(c, dp.W_B), C=T.matmul(c, dp.W_C),
                        A=T.neg(T.exp(dp.A_log)), D=dp.D)
    return selective_scan(c, p)


def dim_block(tokens: Tensor, bp: BlockParams) -> Tensor:
    """Residual bidirectional selective-scan block on [..., K+L, D] tokens."""
    u = T.layernorm(tokens, bp.norm_g, bp.norm_b)
    z = T.matmul(u, bp.W_z)
    v = T.matmul(u, bp.W_v)
    y_f = _direction(v, bp.fwd)
    y_b = T.flip(_direction(T.flip(v, -2), bp.bwd), -2)
    y = T.mul(T.add(y_f, y_b), T.silu(z))
    return T.add(tokens, T.matmul(y, bp.W_out))


def _class_index(y, batch: int, num_classes: int) -> np.ndarray:
    """Rows of the class table; None or -1 pick the null row at index ``num_classes``."""
    if y is None:
        return np.full(batch, num_classes, dtype=np.int64)
    idx = np.broadcast_to(np.asarray([-1 if v is None else v for v in np.atleast_1d(y)],
                                     dtype=np.int64), (batch,))
    if np.any(idx < -1) or np.any(idx >= num_classes):
        raise ValueError(f"unknown class id in {np.unique(idx).tolist()}; model has {num_classes} classes")
    return np.where(idx == -1, num_classes, idx)


def model_forward(x_t, t, y, params: ModelParams, cfg: DiMConfig, steps: int = 1000) -> Tensor:
    """Predict the noise on points ``x_t`` ([N, 3] or [B, N, 3]).

    ``t`` and ``y`` are scalars or per-item arrays; ``y`` None (or -1) selects
    the null class.
    """
    x = np.asarray(x_t, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B = x.shape[0]
    D, K = cfg.hidden, COND_TOKENS
    q = np.clip(x, -1.0, 1.0)
    grid = voxelize(q, cfg.voxel, features=x)     # positions clamped, values raw
    tok = patchify(Tensor(grid), cfg.patch, params.W_embed, params.pos)
    temb = time_embed(np.broadcast_to(np.asarray(t), (B,)), params, steps)
    cemb = T.take_rows(params.class_table, _class_index(y, B, cfg.num_classes))
    seq = T.concat([T.reshape(temb, (B, 1, D)), T.reshape(cemb, (B, 1, D)), tok], axis=1)
    for bp in params.blocks:
        seq = dim_block(seq, bp)
    seq = T.layernorm(seq, params.norm_g, params.norm_b)
    head = T.matmul(seq[:, K:, :], params.W_head)
    out = devoxelize(depatchify(head, cfg.patch, cfg.voxel, 3), q)
    return T.reshape(out, out.shape[1:]) if squeeze else out
