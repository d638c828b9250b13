"""State-space machinery: zero-order-hold discretization, the LTI recurrence
and its convolution-kernel form, and the input-dependent (selective) scan.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg

from . import counter
from .tensor import Tensor, flip, record

LIMIT_NORM = 1e-8


class SingularSystemError(ValueError):
    pass


@dataclass
class ContinuousSSM:
    """h'(t) = A h(t) + B x(t), y(t) = C h(t).

    ``A`` is either an (N, N) matrix or a length-N vector holding a diagonal.
    """
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    @property
    def diagonal(self) -> bool:
        return np.ndim(self.A) == 1

    @property
    def state_size(self) -> int:
        return np.shape(self.A)[0]


@dataclass
class DiscreteSSM:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray
    delta: float = 1.0

    @property
    def diagonal(self) -> bool:
        return np.ndim(self.A_bar) == 1


def discretize_zoh(sys: ContinuousSSM, delta: float) -> DiscreteSSM:
    """A_bar = exp(dA), B_bar = (dA)^-1 (exp(dA) - I) dB."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    B = np.asarray(sys.B, dtype=np.float64).reshape(-1)
    C = np.asarray(sys.C, dtype=np.float64).reshape(-1)
    if sys.diagonal:
        dA = delta * np.asarray(sys.A, dtype=np.float64)
        A_bar = np.exp(dA)
        # expm1(z)/z -> 1 as z -> 0
        safe = np.where(dA == 0.0, 1.0, dA)
        phi = np.where(dA == 0.0, 1.0, np.expm1(dA) / safe)
        return DiscreteSSM(A_bar, phi * delta * B, C, delta)

    dA = delta * np.asarray(sys.A, dtype=np.float64)
    n = dA.shape[0]
    if np.linalg.norm(dA) < LIMIT_NORM or np.linalg.cond(dA) > 1e12:
        raise SingularSystemError(
            "delta*A is singular; use the limit form B_bar = delta*B "
            f"(valid when ||delta*A|| < {LIMIT_NORM:g})")
    A_bar = scipy.linalg.expm(dA)
    B_bar = np.linalg.solve(dA, (A_bar - np.eye(n)) @ (delta * B))
    return DiscreteSSM(A_bar, B_bar, C, delta)


def _step(A_bar: np.ndarray, h: np.ndarray) -> np.ndarray:
    return A_bar * h if A_bar.ndim == 1 else A_bar @ h


def scan_recurrence(sys: DiscreteSSM, x: np.ndarray) -> np.ndarray:
    """h_t = A_bar h_{t-1} + B_bar x_t, y_t = C h_t with h_0 = 0."""
    x = np.asarray(x, dtype=np.float64)
    A_bar = np.asarray(sys.A_bar, dtype=np.float64)
    B_bar = np.asarray(sys.B_bar, dtype=np.float64).reshape(-1)
    C = np.asarray(sys.C, dtype=np.float64).reshape(-1)
    h = np.zeros(B_bar.shape[0])
    y = np.empty(x.shape[0])
    for t, xt in enumerate(x):
        h = _step(A_bar, h) + B_bar * xt
        y[t] = C @ h
    return y


def build_conv_kernel(sys: DiscreteSSM, L: int) -> np.ndarray:
    """K = (C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar)."""
    if L < 1:
        raise ValueError("kernel length must be at least 1")
    A_bar = np.asarray(sys.A_bar, dtype=np.float64)
    C = np.asarray(sys.C, dtype=np.float64).reshape(-1)
    v = np.asarray(sys.B_bar, dtype=np.float64).reshape(-1).copy()
    K = np.empty(L)
    for j in range(L):
        K[j] = C @ v
        v = _step(A_bar, v)
    return K


def apply_conv_kernel(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Causal convolution y_t = sum_{j<=t} K[j] x[t-j]."""
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if kernel.shape != x.shape:
        raise ValueError(f"kernel length {kernel.shape} does not match input {x.shape}")
    return np.convolve(x, kernel)[: x.shape[0]]


@dataclass
class SelectiveParams:
    """Per-position parameters of one scan direction.

    delta: [..., L, E] positive; B, C: [..., L, N]; A: [E, N] negative; D: [E].
    """
    delta: Tensor
    B: Tensor
    C: Tensor
    A: Tensor
    D: Tensor


def scan_flops(L: int, E: int, N: int) -> int:
    return 6 * L * E * N + 3 * L * E


def _scan_forward_numpy(xd, dt, dA, Bt, Ct, D):
    L = xd.shape[1]
    u = (dt * xd)[..., None] * Bt[:, :, None, :]          # [b, L, E, N]
    hs = np.empty_like(u)
    h = np.zeros(dA.shape[:1] + dA.shape[2:])
    for t in range(L):
        h = dA[:, t] * h + u[:, t]
        hs[:, t] = h
    y = np.einsum("blen,bln->ble", hs, Ct) + D * xd
    return y, hs


def _scan_backward_numpy(gy, xd, dt, dA, Bt, Ct, D, A, hs):
    L, E = xd.shape[1], xd.shape[2]
    gh_all = np.empty_like(hs)
    gh = np.zeros(dA.shape[:1] + dA.shape[2:])
    for t in range(L - 1, -1, -1):
        gh = gy[:, t, :, None] * Ct[:, t, None, :] + gh
        gh_all[:, t] = gh
        gh = gh * dA[:, t]
    h_prev = np.zeros_like(hs)
    h_prev[:, 1:] = hs[:, :-1]
    g_z = gh_all * h_prev * dA                          # w.r.t. delta * A
    gBx = np.einsum("blen,bln->ble", gh_all, Bt)
    g_delta = np.einsum("blen,en->ble", g_z, A) + gBx * xd
    g_x = gBx * dt + gy * D
    g_A = np.einsum("blen,ble->en", g_z, dt)
    g_B = np.einsum("blen,ble->bln", gh_all, dt * xd)
    g_C = np.einsum("ble,blen->bln", gy, hs)
    g_D = (gy * xd).reshape(-1, E).sum(0)
    return g_x, g_delta, g_B, g_C, g_A, g_D


@numba.njit(cache=True)
def _scan_forward_numba(xd, dt, dA, Bt, Ct, D):
    nb, L, E = xd.shape
    N = dA.shape[3]
    y = np.empty((nb, L, E))
    hs = np.empty((nb, L, E, N))
    for b in range(nb):
        for t in range(L):
            for e in range(E):
                dx = dt[b, t, e] * xd[b, t, e]
                acc = 0.0
                for n in range(N):
                    hp = hs[b, t - 1, e, n] if t > 0 else 0.0
                    hn = dA[b, t, e, n] * hp + dx * Bt[b, t, n]
                    hs[b, t, e, n] = hn
                    acc += Ct[b, t, n] * hn
                y[b, t, e] = acc + D[e] * xd[b, t, e]
    return y, hs


@numba.njit(cache=True)
def _scan_backward_numba(gy, xd, dt, dA, Bt, Ct, D, A, hs):
    nb, L, E = xd.shape
    N = A.shape[1]
    g_x = np.empty((nb, L, E))
    g_delta = np.empty((nb, L, E))
    g_B = np.zeros((nb, L, N))
    g_C = np.zeros((nb, L, N))
    g_A = np.zeros((E, N))
    g_D = np.zeros(E)
    carry = np.empty((E, N))
    for b in range(nb):
        carry[:] = 0.0
        for t in range(L - 1, -1, -1):
            for e in range(E):
                d = dt[b, t, e]
                xv = xd[b, t, e]
                gyv = gy[b, t, e]
                gd = 0.0
                gbx = 0.0
                for n in range(N):
                    a = dA[b, t, e, n]
                    gh = gyv * Ct[b, t, n] + carry[e, n]
                    hp = hs[b, t - 1, e, n] if t > 0 else 0.0
                    gz = gh * hp * a
                    gd += gz * A[e, n]
                    g_A[e, n] += gz * d
                    gbx += gh * Bt[b, t, n]
                    g_B[b, t, n] += gh * d * xv
                    g_C[b, t, n] += gyv * hs[b, t, e, n]
                    carry[e, n] = gh * a
                g_delta[b, t, e] = gd + gbx * xv
                g_x[b, t, e] = gbx * d + gyv * D[e]
                g_D[e] += gyv * xv
    return g_x, g_delta, g_B, g_C, g_A, g_D


def selective_scan(x: Tensor, p: SelectiveParams, impl: str = "compiled") -> Tensor:
    """Selective scan with exact-ZOH decay and Euler input term.

    h_t = exp(delta_t A) h_{t-1} + delta_t B_t x_t
    y_t = C_t h_t + D x_t
    Leading batch axes are allowed on x, delta, B and C.  ``impl="reference"``
    runs the vectorized numpy recurrence; ``"compiled"`` runs the same
    sequential recurrence as a numba kernel.
    """
    if impl not in ("compiled", "reference"):
        raise ValueError(f"unknown scan implementation {impl!r}")
    dt = p.delta.data
    if np.any(dt <= 0):
        raise ValueError("selective_scan requires delta > 0 everywhere")
    shape = x.shape
    L, E = shape[-2], shape[-1]
    A, D = p.A.data, p.D.data
    N = A.shape[-1]
    lead = np.broadcast_shapes(shape[:-2], dt.shape[:-2], p.B.shape[:-2], p.C.shape[:-2])

    def flat(a, last):
        return np.ascontiguousarray(np.broadcast_to(a, lead + (L, last)).reshape(-1, L, last))

    xd, dtf = flat(x.data, E), flat(dt, E)
    dA = np.exp(dtf[..., None] * A)                      # exact ZOH decay
    args = (xd, dtf, dA, flat(p.B.data, N), flat(p.C.data, N), np.ascontiguousarray(D))
    fwd, bwd = ((_scan_forward_numba, _scan_backward_numba) if impl == "compiled"
                else (_scan_forward_numpy, _scan_backward_numpy))
    y, hs = fwd(*args)
    counter.add("scan", scan_flops(L, E, N) * y.shape[0])
    out_shape = lead + (L, E)

    def unflat(g, like):
        g = g.reshape(lead + g.shape[1:])
        return _sum_to(g, like.shape)

    def bw(gy):
        gy = np.ascontiguousarray(np.broadcast_to(gy, out_shape).reshape(-1, L, E))
        g_x, g_delta, g_B, g_C, g_A, g_D = bwd(gy, *args, np.ascontiguousarray(A), hs)
        return (unflat(g_x, x), unflat(g_delta, p.delta), unflat(g_B, p.B),
                unflat(g_C, p.C), g_A, g_D)

    return record("selective_scan", y.reshape(out_shape), (x, p.delta, p.B, p.C, p.A, p.D), bw)


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def reverse_params(p: SelectiveParams) -> SelectiveParams:
    """Flip the per-position parameters along the sequence axis."""
    return SelectiveParams(flip(p.delta, -2), flip(p.B, -2), flip(p.C, -2), p.A, p.D)


def bidirectional_scan(x: Tensor, p_fwd: SelectiveParams, p_bwd: SelectiveParams) -> Tensor:
    """selective_scan(x, p_fwd) + reverse(selective_scan(reverse(x), p_bwd)).

    ``p_bwd`` is given in the reversed frame: its position 0 pairs with the
    last element of x.
    """
    y_f = selective_scan(x, p_fwd)
    y_b = selective_scan(flip(x, -2), p_bwd)
    return y_f + flip(y_b, -2)
