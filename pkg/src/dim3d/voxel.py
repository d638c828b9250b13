"""Point clouds, voxel grids and patch tokens.

Grid layout is ``[..., x, y, z, C]``.  Patches are enumerated x-fastest, then
y, then z (patch index ``gx + G*gy + G*G*gz`` with ``G = V // P``), and each
patch is flattened as ``[iz, iy, ix, c]`` row-major so channels vary fastest.
Positional embeddings bind to this order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, matmul, record, reshape, transpose

MARGIN = 0.95
PATCH_SIZES = (2, 4, 8)

# corner offsets in (dx, dy, dz), dx fastest
_CORNERS = np.array([[(k >> 0) & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)])


@dataclass
class PointCloud:
    points: np.ndarray
    class_id: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"point cloud must be N x 3 with N >= 1, got {self.points.shape}")

    def __len__(self) -> int:
        return self.points.shape[0]


def normalize_dataset(clouds: list[PointCloud]) -> tuple[list[PointCloud], np.ndarray, float]:
    """Center on the global mean and scale so max |coordinate| == 0.95."""
    if not clouds:
        raise ValueError("cannot normalize an empty dataset")
    allpts = np.concatenate([c.points for c in clouds])
    mean = allpts.mean(axis=0)
    extent = np.max(np.abs(allpts - mean))
    if not extent > 0:
        raise ValueError("degenerate dataset: all points are identical")
    scale = float(extent / MARGIN)
    out = [PointCloud((c.points - mean) / scale, c.class_id) for c in clouds]
    return out, mean, scale


def denormalize(points: np.ndarray, mean: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(points) * scale + mean


def trilinear_weights(points: np.ndarray, V: int) -> tuple[np.ndarray, np.ndarray]:
    """Corner cell indices [..., N, 8, 3] and weights [..., N, 8] for points in [-1, 1]."""
    if V < 2:
        raise ValueError("voxel resolution must be at least 2")
    g = (np.asarray(points, dtype=np.float64) + 1.0) / 2.0 * (V - 1)
    i0 = np.clip(np.floor(g), 0, V - 2)
    f = np.clip(g - i0, 0.0, 1.0)
    i0 = i0.astype(np.int64)
    idx = i0[..., None, :] + _CORNERS
    # per-axis weight is f on the upper corner, 1 - f on the lower
    wa = np.where(_CORNERS == 1, f[..., None, :], 1.0 - f[..., None, :])
    w = wa[..., 0] * wa[..., 1] * wa[..., 2]
    return idx, w


def _flat_cells(idx: np.ndarray, V: int) -> np.ndarray:
    return (idx[..., 0] * V + idx[..., 1]) * V + idx[..., 2]


def voxelize(points: np.ndarray, V: int, features: np.ndarray | None = None) -> np.ndarray:
    """Trilinear scatter of xyz features, normalized by accumulated weight.

    ``points`` is [N, 3] or [B, N, 3]; returns [V, V, V, 3] or [B, V, V, V, 3].
    The scattered features default to the coordinates themselves; pass
    ``features`` (same shape) to place one set of values at another set of
    positions. Accumulation runs in a canonical order so the grid does not
    depend on point order.
    """
    pts = np.asarray(points, dtype=np.float64)
    vals = pts if features is None else np.asarray(features, dtype=np.float64)
    if vals.shape != pts.shape:
        raise ValueError(f"features shape {vals.shape} does not match points {pts.shape}")
    squeeze = pts.ndim == 2
    if squeeze:
        pts, vals = pts[None], vals[None]
    B, N = pts.shape[:2]
    idx, w = trilinear_weights(pts, V)
    cell = _flat_cells(idx, V) + (np.arange(B) * V**3)[:, None, None]
    feat = np.broadcast_to(vals[:, :, None, :], (B, N, 8, 3))
    cell, w, feat = cell.reshape(-1), w.reshape(-1), feat.reshape(-1, 3)
    order = np.lexsort((feat[:, 2], feat[:, 1], feat[:, 0], w, cell))
    cell, w, feat = cell[order], w[order], feat[order]
    size = B * V**3
    wsum = np.bincount(cell, weights=w, minlength=size)
    grid = np.zeros((size, 3))
    hit = wsum > 0
    for c in range(3):
        acc = np.bincount(cell, weights=w * feat[:, c], minlength=size)
        grid[hit, c] = acc[hit] / wsum[hit]
    grid = grid.reshape(B, V, V, V, 3)
    return grid[0] if squeeze else grid


def devoxelize(grid: Tensor, at: np.ndarray) -> Tensor:
    """Trilinear interpolation of ``grid`` [..., V, V, V, C] at points [..., N, 3]."""
    gd = grid.data
    V, C = gd.shape[-2], gd.shape[-1]
    lead = gd.shape[:-4]
    idx, w = trilinear_weights(at, V)
    cells = _flat_cells(idx, V)                           # [..., N, 8]
    flat = gd.reshape(lead + (V**3, C))
    if lead:
        B = int(np.prod(lead))
        flat2 = flat.reshape(B, V**3, C)
        cells2 = cells.reshape(B, -1)
        gathered = np.take_along_axis(flat2, cells2[..., None], axis=1).reshape(cells.shape + (C,))
    else:
        gathered = flat[cells]
    out = np.einsum("...k,...kc->...c", w, gathered)

    def bw(g):
        contrib = w[..., None] * g[..., None, :]          # [..., N, 8, C]
        gflat = np.zeros((int(np.prod(lead)) if lead else 1, V**3, C))
        b = np.repeat(np.arange(gflat.shape[0]), cells.size // gflat.shape[0])
        np.add.at(gflat, (b, cells.reshape(-1)), contrib.reshape(-1, C))
        return (gflat.reshape(gd.shape),)

    return record("devoxelize", out, (grid,), bw)


def _check_patch(V: int, P: int) -> int:
    if P not in PATCH_SIZES:
        raise ValueError(f"patch size must be one of {PATCH_SIZES}, got {P}")
    if V % P:
        raise ValueError(f"patch size {P} does not divide voxel resolution {V}")
    return V // P


def num_tokens(V: int, P: int) -> int:
    return _check_patch(V, P) ** 3


def flatten_patches(grid: Tensor, P: int) -> Tensor:
    """[..., V, V, V, C] -> [..., L, P^3 C] in the module's patch order."""
    grid = grid if isinstance(grid, Tensor) else Tensor(grid)
    *lead, V, _, _, C = grid.shape
    G = _check_patch(V, P)
    lead = tuple(lead)
    n = len(lead)
    x = reshape(grid, lead + (G, P, G, P, G, P, C))
    # (gx ix gy iy gz iz c) -> (gz gy gx iz iy ix c)
    perm = tuple(range(n)) + tuple(n + a for a in (4, 2, 0, 5, 3, 1, 6))
    x = transpose(x, perm)
    return reshape(x, lead + (G**3, P**3 * C))


def unflatten_patches(tokens: Tensor, P: int, V: int, C: int) -> Tensor:
    """Exact inverse of :func:`flatten_patches`."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    G = _check_patch(V, P)
    *lead, L, Dp = tokens.shape
    if L != G**3 or Dp != P**3 * C:
        raise ValueError(f"tokens {tokens.shape} inconsistent with V={V}, P={P}, C={C}")
    lead = tuple(lead)
    n = len(lead)
    x = reshape(tokens, lead + (G, G, G, P, P, P, C))
    # (gz gy gx iz iy ix c) -> (gx ix gy iy gz iz c)
    perm = tuple(range(n)) + tuple(n + a for a in (2, 5, 1, 4, 0, 3, 6))
    x = transpose(x, perm)
    return reshape(x, lead + (V, V, V, C))


def patchify(grid, P: int, W_embed: Tensor, pos: Tensor) -> Tensor:
    """Flatten patches, project to the hidden width, add positional embeddings."""
    return add(matmul(flatten_patches(grid, P), W_embed), pos)


def depatchify(tokens: Tensor, P: int, V: int, C: int) -> Tensor:
    return unflatten_patches(tokens, P, V, C)
