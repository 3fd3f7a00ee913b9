"""Truncated-SVD forward pass and its exact backward pass.

Everything here works on the "tall" orientation (rows >= cols); wider
matrices are transposed on the way in and out.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalFailureError
from .linalg import as_matrix, svd, truncate

DEFAULT_DELTA = math.sqrt(0.99)


@dataclass(frozen=True)
class ClipConfig:
    """Upper bound applied to singular-value ratios in the backward pass."""

    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise InvalidInputError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class SvdGradWorkspace:
    u_kept: np.ndarray
    v_kept: np.ndarray
    u_dropped: np.ndarray
    v_dropped: np.ndarray
    s_kept: np.ndarray
    s_dropped: np.ndarray
    rho: np.ndarray
    shape: tuple
    rank: int
    transposed: bool

    @property
    def full_rank(self):
        return self.s_dropped.size == 0


def singular_ratios(s_kept, s_dropped):
    """``rho[i, j] = s_dropped[j] / s_kept[i]``; zero where ``s_kept[i] == 0``."""
    num = np.broadcast_to(s_dropped[None, :], (s_kept.size, s_dropped.size))
    den = np.broadcast_to(s_kept[:, None], num.shape)
    out = np.zeros(num.shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


def lowrank_forward(w, r, factors=None):
    """Return ``(w_tilde, workspace)`` for the rank-``r`` truncation of ``w``.

    ``factors`` may carry a precomputed SVD of ``w`` to avoid recomputing it.
    """
    w = as_matrix(w, "weight")
    m, n = w.shape
    transposed = m < n
    if factors is None:
        factors = svd(w)
    w_tilde = truncate(factors, r)
    f = factors.transpose() if transposed else factors
    ws = SvdGradWorkspace(
        u_kept=f.u[:, :r],
        v_kept=f.v[:, :r],
        u_dropped=f.u[:, r:],
        v_dropped=f.v[:, r:],
        s_kept=f.s[:r],
        s_dropped=f.s[r:],
        rho=singular_ratios(f.s[:r], f.s[r:]),
        shape=(m, n),
        rank=r,
        transposed=transposed,
    )
    return w_tilde, ws


def clip_rho(rho, clip=ClipConfig()):
    return np.minimum(rho, clip.delta)


def lowrank_backward(ws, grad_wtilde, clip=ClipConfig(), layer=None):
    """Map dL/dW_tilde to dL/dW through the truncated SVD.

    With ``A = Vk' G' Ud`` and ``B = Uk' G Vd`` the gradient is

        G Vk Vk' + Uk (k1*A + k2*B) Vd' + Ud (k3*A + k1*B)' Vk'

    where ``k1 = rho/(1-rho^2)``, ``k2 = 1/(1-rho^2)``, ``k3 = rho^2/(1-rho^2)``
    on the clipped ratio matrix. Nothing is dropped at full rank, so the
    incoming gradient is returned as is.
    """
    g = np.asarray(grad_wtilde, dtype=np.float64)
    if g.shape != ws.shape:
        raise InvalidInputError(f"gradient shape {g.shape} does not match weight shape {ws.shape}")
    if ws.full_rank:
        return g.copy()
    if ws.transposed:
        g = g.T
    uk, vk, ud, vd = ws.u_kept, ws.v_kept, ws.u_dropped, ws.v_dropped
    a = vk.T @ g.T @ ud
    b = uk.T @ g @ vd
    rho = clip_rho(ws.rho, clip)
    inv = 1.0 / (1.0 - rho * rho)
    k1 = rho * inv
    k3 = rho * k1
    out = (g @ vk) @ vk.T + uk @ (k1 * a + inv * b) @ vd.T + ud @ (k3 * a + k1 * b).T @ vk.T
    if ws.transposed:
        out = out.T
    if not np.all(np.isfinite(out)):
        raise NumericalFailureError("non-finite gradient through truncated SVD", layer=layer)
    return out


def rebalance_lambda(lam, grad_full_norm, grad_low_norm):
    """Rescale the low-rank weight so both gradient terms have equal norm."""
    if grad_full_norm < 0 or grad_low_norm < 0:
        raise InvalidInputError("gradient norms must be non-negative")
    if grad_low_norm == 0:
        return lam
    return lam * grad_full_norm / grad_low_norm
