"""Dense linear algebra: one-sided Jacobi SVD, truncation, kernel matricization.

Matrices are plain 2-D ``float64`` numpy arrays. Convolution kernels use the
``(k_h, k_w, c_in, c_out)`` layout throughout the package.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidRankError, NumericalFailureError

MAX_SWEEPS = 60
ZERO_CUTOFF = 1e-12
# entries below this magnitude are ignored when fixing the sign of a u column
SIGN_EPS = 1e-8

_svd_calls = 0


def svd_call_count():
    """Number of times :func:`svd` has run in this process."""
    return _svd_calls


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``a = u @ diag(s) @ v.T`` with ``s`` descending."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank_limit(self):
        return self.s.shape[0]

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])

    def transpose(self):
        return SvdFactors(self.v, self.s, self.u)


def _round_robin(n):
    """Pairings for one sweep of the parallel (tournament) Jacobi ordering.

    Every unordered pair of ``range(n)`` appears exactly once across the
    returned rounds, and pairs within a round are disjoint.
    """
    players = list(range(n + (n % 2)))
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        p, q = [], []
        for i in range(k // 2):
            a, b = players[i], players[k - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        if p:
            rounds.append((np.array(p), np.array(q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u, filled):
    """Replace the columns of ``u`` not flagged in ``filled`` with an
    orthonormal completion built from standard basis vectors."""
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if filled[j]]
    for j in range(u.shape[1]):
        if filled[j]:
            continue
        best, best_norm = None, -1.0
        for e in range(m):
            cand = np.zeros(m)
            cand[e] = 1.0
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > best_norm + 1e-12:
                best, best_norm = cand, nrm
        vec = best / best_norm
        u[:, j] = vec
        basis.append(vec)
    return u


def _jacobi_tall(a):
    m, n = a.shape
    g = a.copy()
    v = np.eye(n)
    tol = m * np.finfo(np.float64).eps
    rounds = _round_robin(n)
    residual = 0.0
    for _ in range(MAX_SWEEPS):
        rotated = False
        residual = 0.0
        for p, q in rounds:
            gp, gq = g[:, p], g[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                off = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            residual = max(residual, float(off.max(initial=0.0)))
            act = off > tol
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = g[:, p], g[:, q]
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            return g, v
    raise NumericalFailureError(
        f"Jacobi SVD did not converge within {MAX_SWEEPS} sweeps", residual=residual
    )


def svd(a):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Columns are orthogonalised pairwise in tournament order until every
    pair has relative inner product below ``m * eps``. Singular values below
    ``1e-12 * s_max`` are set to exactly zero and their left vectors are
    replaced by an orthonormal completion. Each column of ``u`` is signed
    so that its first entry of magnitude above 1e-8 is positive, with the
    matching column of ``v`` flipped alongside.
    """
    global _svd_calls
    a = as_matrix(a)
    _svd_calls += 1
    m, n = a.shape
    if m < n:
        f = _svd_tall(a.T)
        return _fix_signs(f.v, f.s, f.u)
    f = _svd_tall(a)
    return _fix_signs(f.u, f.s, f.v)


def _svd_tall(a):
    g, v = _jacobi_tall(a)
    s = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-s, kind="stable")
    s, g, v = s[order], g[:, order], v[:, order]
    smax = s[0] if s.size else 0.0
    live = s > ZERO_CUTOFF * smax if smax > 0 else np.zeros_like(s, dtype=bool)
    u = np.zeros_like(g)
    u[:, live] = g[:, live] / s[live]
    s = np.where(live, s, 0.0)
    if not live.all():
        u = _complete_basis(u, live)
    return SvdFactors(u, s, v)


def _fix_signs(u, s, v):
    u, v = u.copy(), v.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        idx = np.flatnonzero(np.abs(col) > SIGN_EPS)
        if idx.size and col[idx[0]] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    return SvdFactors(u, s, v)


def truncate(f, r):
    """Best rank-``r`` approximation from precomputed factors."""
    if not (isinstance(r, (int, np.integer)) and 1 <= r <= f.rank_limit):
        raise InvalidRankError(f"rank {r} outside [1, {f.rank_limit}]")
    return (f.u[:, :r] * f.s[:r]) @ f.v[:, :r].T


def spectral_norm(a):
    return float(svd(a).s[0])


# --- convolution kernels -------------------------------------------------


@dataclass(frozen=True)
class ConvKernelShape:
    k_h: int
    k_w: int
    c_in: int
    c_out: int
    stride: int = 1

    def __post_init__(self):
        for name in ("k_h", "k_w", "c_in", "c_out", "stride"):
            val = getattr(self, name)
            if not isinstance(val, (int, np.integer)) or val < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {val!r}")

    @property
    def tensor_shape(self):
        return (self.k_h, self.k_w, self.c_in, self.c_out)

    @property
    def is_pointwise(self):
        return self.k_h == 1 and self.k_w == 1

    def matrix_shape(self, mode="channel"):
        if resolve_mode(self, mode) == "spatial":
            return (self.k_h * self.c_in, self.k_w * self.c_out)
        return (self.k_h * self.k_w * self.c_in, self.c_out)


def resolve_mode(shape, mode):
    if mode not in ("channel", "spatial"):
        raise InvalidInputError(f"unknown decomposition {mode!r}")
    # 1x1 kernels have no spatial structure to split
    return "channel" if shape.is_pointwise else mode


def _check_kernel(kernel, shape):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != shape.tensor_shape:
        raise InvalidInputError(
            f"kernel shape {kernel.shape} does not match {shape.tensor_shape}"
        )
    return kernel


def matricize_channel(kernel, shape):
    """``(k_h, k_w, c_in, c_out) -> (k_h*k_w*c_in, c_out)``.

    Row index is ``(i*k_w + j)*c_in + c`` for spatial offset ``(i, j)`` and
    input channel ``c``; this is a plain row-major reshape.
    """
    return _check_kernel(kernel, shape).reshape(shape.k_h * shape.k_w * shape.c_in, shape.c_out)


def dematricize_channel(mat, shape):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != shape.matrix_shape("channel"):
        raise InvalidInputError(f"matrix shape {mat.shape} does not match {shape}")
    return mat.reshape(shape.tensor_shape)


def matricize_spatial(kernel, shape):
    """``(k_h, k_w, c_in, c_out) -> (k_h*c_in, k_w*c_out)``.

    Entry ``[i, j, c, o]`` lands at row ``i*c_in + c``, column ``j*c_out + o``,
    so a rank-r factorization splits into a ``k_h x 1`` conv with r outputs
    followed by a ``1 x k_w`` conv. 1x1 kernels use the channel form.
    """
    kernel = _check_kernel(kernel, shape)
    if shape.is_pointwise:
        return matricize_channel(kernel, shape)
    return kernel.transpose(0, 2, 1, 3).reshape(shape.k_h * shape.c_in, shape.k_w * shape.c_out)


def dematricize_spatial(mat, shape):
    if shape.is_pointwise:
        return dematricize_channel(mat, shape)
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != shape.matrix_shape("spatial"):
        raise InvalidInputError(f"matrix shape {mat.shape} does not match {shape}")
    return mat.reshape(shape.k_h, shape.c_in, shape.k_w, shape.c_out).transpose(0, 2, 1, 3)


def matricize(kernel, shape, mode):
    if resolve_mode(shape, mode) == "spatial":
        return matricize_spatial(kernel, shape)
    return matricize_channel(kernel, shape)


def dematricize(mat, shape, mode):
    if resolve_mode(shape, mode) == "spatial":
        return dematricize_spatial(mat, shape)
    return dematricize_channel(mat, shape)
