"""Closed-form FLOP counts: DiM model versus a self-attention transformer.

Counts are for one cloud (batch 1), in exact integer arithmetic, and follow
the runtime counter's conventions: matmul 2mnk, depthwise conv 2kLE,
layernorm 7 per element, selective scan 6LEN + 3LE, one per elementwise
add/mul. Transcendentals (exp, SiLU, softplus) are left out.
"""
from __future__ import annotations

import csv
import io
import math

from .model import COND_TOKENS, SIZES, TIME_FEATURES, DiMConfig
from .ssm import scan_flops

TABLE4_VOXELS = (256, 512, 1024, 2048)


def _block_flops(cfg: DiMConfig, n: int) -> int:
    """One DiM block on ``n`` tokens (conditioning tokens included)."""
    D, E, N, k = cfg.hidden, cfg.inner, cfg.state_size, cfg.conv_width
    per_dir = (2 * k * n * E            # causal depthwise conv
               + 2 * n * E + n * E      # rank-1 step-size head and its bias
               + 2 * 2 * n * E * N      # input-dependent B and C
               + scan_flops(n, E, N))
    return (7 * n * D                   # layernorm
            + 2 * 2 * n * D * E         # z and v projections
            + 2 * per_dir
            + n * E + n * E             # merge directions, gate
            + 2 * n * E * D             # output projection
            + n * D)                    # residual


def flops_dim_model(cfg: DiMConfig, L: int) -> int:
    """Forward FLOPs of the full network on ``L`` patch tokens."""
    if L < 0:
        raise ValueError("token count must be non-negative")
    D, Pd = cfg.hidden, cfg.patch_dim
    n = L + COND_TOKENS
    embed = 2 * L * Pd * D + L * D
    time = 2 * TIME_FEATURES * D + D + 2 * D * D + D
    head = 7 * n * D + 2 * L * D * Pd
    return embed + time + cfg.layers * _block_flops(cfg, n) + head


def flops_attention_model(layers: int, D: int, L: int) -> int:
    """Per block: QKV/out projections 4LD^2, scores and values 4L^2D, 4x MLP 16LD^2."""
    return layers * (4 * L * D * D + 4 * L * L * D + 16 * L * D * D)


def crossover_tokens(cfg: DiMConfig) -> int:
    """Smallest L >= 1 such that DiM is cheaper than attention for every L' >= L."""
    a = flops_dim_model(cfg, 1) - flops_dim_model(cfg, 0)
    b = flops_dim_model(cfg, 0)
    # attention - dim = q L^2 + r L - b, a convex quadratic in L
    q = 4 * cfg.layers * cfg.hidden
    r = 20 * cfg.layers * cfg.hidden**2 - a

    def cheaper(L: int) -> bool:
        return flops_dim_model(cfg, L) < flops_attention_model(cfg.layers, cfg.hidden, L)

    root = (-r + math.sqrt(r * r + 4 * q * b)) / (2 * q)
    L = max(1, math.ceil(root))
    while L > 1 and cheaper(L - 1):
        L -= 1
    while not cheaper(L):
        L += 1
    return L


def size_config(size: str, patch: int, voxel: int) -> DiMConfig:
    return DiMConfig.from_size(size, patch=patch, voxel=voxel)


def scaling_report(cfgs: list[tuple[str, DiMConfig]], voxels: list[int] | None = None) -> str:
    """CSV with one row per (config, voxel size); ``voxels`` defaults to each config's own."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "voxel", "patch", "tokens", "dim_flops", "attn_flops", "crossover_tokens"])
    for name, cfg in cfgs:
        cross = crossover_tokens(cfg)
        for V in (voxels or [cfg.voxel]):
            if V % cfg.patch:
                raise ValueError(f"patch {cfg.patch} does not divide voxel size {V}")
            L = (V // cfg.patch) ** 3
            w.writerow([name, V, cfg.patch, L, flops_dim_model(cfg, L),
                        flops_attention_model(cfg.layers, cfg.hidden, L), cross])
    return buf.getvalue()


def table_configs(patch: int = 2) -> list[tuple[str, DiMConfig]]:
    return [(f"{s}/{patch}", size_config(s, patch, 32)) for s in SIZES]
