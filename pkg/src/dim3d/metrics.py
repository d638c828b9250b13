"""Chamfer / Earth Mover's distances and the 1-NNA and COV set metrics.

Conventions: CD averages *squared* nearest-neighbour distances in both
directions; EMD is the mean *Euclidean* cost of an optimal bijection.
Distance ties resolve to the lowest index everywhere.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .voxel import PointCloud

DISTANCES = ("cd", "emd")


def _points(c) -> np.ndarray:
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("distance needs a non-empty N x 3 cloud")
    return pts


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances [..., Na, Nb], symmetric bit-for-bit."""
    d = a[..., :, None, :] - b[..., None, :, :]
    return (d * d).sum(-1)


def _chamfer_from_sq(sq: np.ndarray) -> float:
    return (math.fsum(sq.min(axis=1)) / sq.shape[0]
            + math.fsum(sq.min(axis=0)) / sq.shape[1])


def chamfer(a, b) -> float:
    return _chamfer_from_sq(sq_dists(_points(a), _points(b)))


def emd(a, b) -> float:
    a, b = _points(a), _points(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"EMD needs equal-size clouds, got {a.shape[0]} and {b.shape[0]}")
    cost = np.sqrt(sq_dists(a, b))
    rows, cols = linear_sum_assignment(cost)
    return math.fsum(cost[rows, cols]) / a.shape[0]


def distance_matrix(xs: list, ys: list, dist: str) -> np.ndarray:
    """All pairwise distances between two lists of clouds."""
    if dist not in DISTANCES:
        raise ValueError(f"unknown distance {dist!r}; expected one of {DISTANCES}")
    xs = [_points(x) for x in xs]
    ys = [_points(y) for y in ys]
    out = np.empty((len(xs), len(ys)))
    same = len({y.shape for y in ys}) == 1
    stacked = np.stack(ys) if same and ys else None
    for i, x in enumerate(xs):
        if dist == "cd" and stacked is not None:
            sq = sq_dists(x[None], stacked)              # [m, Nx, Ny]
            for j in range(len(ys)):
                out[i, j] = _chamfer_from_sq(sq[j])
        else:
            fn = chamfer if dist == "cd" else emd
            for j, y in enumerate(ys):
                out[i, j] = fn(x, y)
    return out


def _union_matrix(gen: list, ref: list, dist: str) -> np.ndarray:
    clouds = list(gen) + list(ref)
    n = len(clouds)
    M = np.zeros((n, n))
    for i in range(n):
        row = distance_matrix([clouds[i]], clouds[i + 1:], dist)[0] if i + 1 < n else []
        M[i, i + 1:] = row
        M[i + 1:, i] = row
    return M


def one_nna_from_matrix(M: np.ndarray, n_gen: int) -> float:
    n = M.shape[0]
    if n_gen < 1 or n - n_gen < 1:
        raise ValueError("1-NNA needs both sets non-empty")
    D = M.copy()
    np.fill_diagonal(D, np.inf)
    nn = np.argmin(D, axis=1)                          # first minimum = lowest index
    is_gen = np.arange(n) < n_gen
    correct = is_gen == is_gen[nn]
    return 100.0 * correct.mean()


def one_nna(gen: list, ref: list, dist: str = "cd") -> float:
    """Leave-one-out 1-NN two-sample accuracy over gen + ref, in percent."""
    if not gen or not ref:
        raise ValueError("1-NNA needs both sets non-empty")
    return one_nna_from_matrix(_union_matrix(gen, ref, dist), len(gen))


def coverage_from_matrix(M: np.ndarray) -> float:
    """M is [gen, ref]; percent of ref clouds that are some gen cloud's nearest ref."""
    nearest = np.argmin(M, axis=1)
    return 100.0 * len(np.unique(nearest)) / M.shape[1]


def coverage(gen: list, ref: list, dist: str = "cd") -> float:
    if not gen or not ref:
        raise ValueError("coverage needs both sets non-empty")
    return coverage_from_matrix(distance_matrix(gen, ref, dist))


@dataclass
class MetricsReport:
    n_gen: int
    n_ref: int
    one_nna_cd: float | None = None
    one_nna_emd: float | None = None
    cov_cd: float | None = None
    cov_emd: float | None = None
    mean_cd: float | None = None
    mean_emd: float | None = None

    def fields(self) -> dict:
        return {k: v for k, v in sorted(asdict(self).items()) if v is not None}

    def to_text(self) -> str:
        lines = []
        for k, v in self.fields().items():
            lines.append(f"{k} = {v}" if isinstance(v, int) else f"{k} = {v:.6f}")
        return "\n".join(lines) + "\n"

    def csv_header(self) -> str:
        return ",".join(self.fields()) + "\n"

    def csv_row(self) -> str:
        return ",".join(str(v) if isinstance(v, int) else f"{v:.6f}" for v in self.fields().values()) + "\n"


def evaluate(gen: list, ref: list, metric: str = "both") -> MetricsReport:
    """1-NNA, COV and mean nearest-reference distance for each requested distance."""
    if metric not in ("cd", "emd", "both"):
        raise ValueError(f"metric must be cd, emd or both, got {metric!r}")
    if not gen or not ref:
        raise ValueError("evaluation needs non-empty generated and reference sets")
    report = MetricsReport(n_gen=len(gen), n_ref=len(ref))
    for d in (("cd", "emd") if metric == "both" else (metric,)):
        U = _union_matrix(gen, ref, d)
        cross = U[: len(gen), len(gen):]
        setattr(report, f"one_nna_{d}", one_nna_from_matrix(U, len(gen)))
        setattr(report, f"cov_{d}", coverage_from_matrix(cross))
        setattr(report, f"mean_{d}", float(np.mean(cross.min(axis=1))))
    return report
