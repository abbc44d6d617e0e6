"""Weighted bidirectional Procrustes solver.

The cross-pose ``T`` maps the action cloud ``P_A`` toward its corrected
correspondences ``V_A`` and maps ``V_B`` (the correspondences of the anchor
points) toward ``P_B``. Both sides are centered independently with their own
weights, stacked, and a single rotation is read off a 3x3 SVD with the
reflection fix ``diag(1, 1, det(U V^T))``. The translation mixes the two
one-sided translations by point count.

The differentiable core works on float64 torch tensors; ``svd3`` has a
hand-written forward (one-sided Jacobi) and backward (the standard SVD
differential), so gradients never go through ``torch.linalg.svd``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateCorrespondences, NearDegenerateSpectrum
from .geometry import RigidTransform, as_cloud

RANK_TOL = 1e-12
GAP_TOL = 1e-8
_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class Svd3Result:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Points and their goal positions for both objects, with weights.

    ``target_a[i]`` is where ``source_a[i]`` should land under ``T``;
    ``target_b[i]`` is where ``source_b[i]`` should land under ``T^-1``.
    """

    source_a: np.ndarray
    target_a: np.ndarray
    source_b: np.ndarray
    target_b: np.ndarray
    weights_a: np.ndarray
    weights_b: np.ndarray

    def __post_init__(self):
        for name in ("source_a", "target_a", "source_b", "target_b"):
            object.__setattr__(self, name, as_cloud(getattr(self, name)))
        for name in ("weights_a", "weights_b"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        if self.source_a.shape != self.target_a.shape or self.weights_a.shape[0] != self.source_a.shape[0]:
            raise ValueError("side A sources, targets and weights must have matching lengths")
        if self.source_b.shape != self.target_b.shape or self.weights_b.shape[0] != self.source_b.shape[0]:
            raise ValueError("side B sources, targets and weights must have matching lengths")
        for w in (self.weights_a, self.weights_b):
            if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
                raise ValueError("weights must be finite, non-negative, with positive sum per side")

    @classmethod
    def uniform(cls, source_a, target_a, source_b, target_b):
        na, nb = len(source_a), len(source_b)
        return cls(source_a, target_a, source_b, target_b, np.full(na, 1.0 / na), np.full(nb, 1.0 / nb))

    def tensors(self, requires_grad=False):
        return tuple(
            torch.tensor(np.array(a), dtype=torch.float64, requires_grad=requires_grad)
            for a in (self.source_a, self.target_a, self.source_b, self.target_b, self.weights_a, self.weights_b)
        )


@dataclass(frozen=True, eq=False)
class ProcrustesSolution:
    transform: RigidTransform
    objective: float
    rank_flag: bool


# --------------------------------------------------------------------------
# 3x3 SVD


def _jacobi_svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided (Hestenes) Jacobi: rotate columns of ``m`` until orthogonal.

    Implicitly diagonalizes ``m^T m``; the accumulated rotations are ``V`` and
    the orthogonal columns of ``m V`` are ``U * sigma``.
    """
    a = np.array(m, dtype=np.float64)
    v = np.eye(3)
    for _ in range(64):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            alpha = a[:, p] @ a[:, p]
            beta = a[:, q] @ a[:, q]
            gamma = a[:, p] @ a[:, q]
            if gamma == 0.0 or abs(gamma) <= _EPS * np.sqrt(alpha * beta):
                continue
            rotated = True
            with np.errstate(over="ignore"):
                # an infinite zeta gives t = 0, the correct no-rotation limit
                zeta = (beta - alpha) / (2.0 * gamma)
            t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]

    u = np.zeros((3, 3))
    floor = max(sigma[0], 1e-300) * 1e-14
    live = sigma > floor
    u[:, live] = a[:, live] / sigma[live]
    _complete_basis(u, int(live.sum()))

    # Deterministic signs: largest-magnitude entry of each right vector positive.
    for i in range(3):
        j = np.argmax(np.abs(v[:, i]))
        if v[j, i] < 0:
            v[:, i] = -v[:, i]
            u[:, i] = -u[:, i]
    return u, sigma, v


def _complete_basis(u: np.ndarray, k: int) -> None:
    """Fill columns k..2 of ``u`` in place with an orthonormal completion."""
    if k == 0:
        u[:] = np.eye(3)
        return
    if k == 1:
        e = np.eye(3)[np.argmin(np.abs(u[:, 0]))]
        w = e - (e @ u[:, 0]) * u[:, 0]
        u[:, 1] = w / np.linalg.norm(w)
    if k <= 2:
        w = np.cross(u[:, 0], u[:, 1])
        u[:, 2] = w / np.linalg.norm(w)


class _Svd3(torch.autograd.Function):
    @staticmethod
    def forward(ctx, m):
        u, s, v = _jacobi_svd(m.detach().cpu().numpy())
        u, s, v = (torch.from_numpy(x).to(m) for x in (u, s, v))
        ctx.save_for_backward(u, s, v)
        return u, s, v

    @staticmethod
    def backward(ctx, gu, gs, gv):
        u, s, v = ctx.saved_tensors
        s2 = s * s
        # e[i, j] = s_j^2 - s_i^2; the cross terms use 1 / e off the diagonal.
        e = s2[None, :] - s2[:, None]
        off = ~torch.eye(3, dtype=torch.bool)
        inner = torch.zeros(3, 3, dtype=s.dtype)
        if gu is not None and not torch.any(gu != 0):
            gu = None
        if gv is not None and not torch.any(gv != 0):
            gv = None
        if gu is not None or gv is not None:
            if torch.any(e[off].abs() <= GAP_TOL):
                raise NearDegenerateSpectrum(
                    f"singular-value gap below {GAP_TOL:g}: sigma = {s.tolist()}"
                )
            k = torch.where(off, 1.0 / torch.where(off, e, torch.ones_like(e)), torch.zeros_like(e))
            if gu is not None:
                j = u.T @ gu
                inner = inner + (k * (j - j.T)) * s[None, :]
            if gv is not None:
                j = v.T @ gv
                inner = inner + s[:, None] * (k * (j - j.T))
        if gs is not None:
            inner = inner + torch.diag(gs)
        return u @ inner @ v.T


def svd3_torch(m: torch.Tensor):
    """Differentiable 3x3 SVD ``m = u @ diag(s) @ v.T`` with descending ``s``."""
    return _Svd3.apply(m)


def svd3(m) -> Svd3Result:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise ValueError("svd3 needs a finite 3x3 matrix")
    u, s, v = _jacobi_svd(m)
    return Svd3Result(u, s, v)


# --------------------------------------------------------------------------
# Differentiable solver core


def _weighted_mean(w, x):
    return (w / w.sum()) @ x


def _mix(na, nb, t_a, t_b):
    n = na + nb
    return (na / n) * t_a + (nb / n) * t_b


def weighted_procrustes(src_a, tgt_a, src_b, tgt_b, w_a, w_b, translation_only=False):
    """Solve for ``(R, t)`` on torch tensors; differentiable in every input.

    Returns ``(R, t, rank_flag)``. Raises ``DegenerateCorrespondences`` when
    the weighted cross-covariance has rank < 2.
    """
    na, nb = src_a.shape[0], src_b.shape[0]
    pa = _weighted_mean(w_a, src_a)
    va = _weighted_mean(w_a, tgt_a)
    pb = _weighted_mean(w_b, src_b)
    vb = _weighted_mean(w_b, tgt_b)
    if translation_only:
        eye = torch.eye(3, dtype=src_a.dtype)
        return eye, _mix(na, nb, va - pa, pb - vb), False

    x = torch.cat([src_a - pa, tgt_b - vb])
    y = torch.cat([tgt_a - va, src_b - pb])
    w = torch.cat([w_a, w_b])
    m = (y * w[:, None]).T @ x  # sum_i w_i y_i x_i^T
    u, s, v = svd3_torch(m)
    sd = s.detach()
    s0 = float(sd[0])
    if not s0 > 0 or float(sd[1]) < RANK_TOL * s0:
        raise DegenerateCorrespondences(
            f"weighted cross-covariance has rank < 2 (sigma = {sd.tolist()})"
        )
    rank_flag = bool(float(sd[2]) < RANK_TOL * s0)
    d = 1.0 if torch.det(u @ v.T) > 0 else -1.0
    r = u @ torch.diag(torch.tensor([1.0, 1.0, d], dtype=m.dtype)) @ v.T
    t = _mix(na, nb, va - r @ pa, pb - r @ vb)
    return r, t, rank_flag


def objective_torch(r, t, src_a, tgt_a, src_b, tgt_b, w_a, w_b):
    ra = src_a @ r.T + t - tgt_a
    rb = (src_b - t) @ r - tgt_b
    return w_a @ (ra * ra).sum(1) + w_b @ (rb * rb).sum(1)


def objective(c: CorrespondenceSet, transform: RigidTransform) -> float:
    """Weighted least-squares cost of ``transform`` on ``c``."""
    with torch.no_grad():
        r = torch.from_numpy(np.array(transform.rotation))
        t = torch.from_numpy(np.array(transform.translation))
        return float(objective_torch(r, t, *c.tensors()))


# --------------------------------------------------------------------------
# Public numpy-facing API


def _solve(c: CorrespondenceSet, translation_only: bool) -> ProcrustesSolution:
    with torch.no_grad():
        args = c.tensors()
        r, t, flag = weighted_procrustes(*args, translation_only=translation_only)
        obj = float(objective_torch(r, t, *args))
    return ProcrustesSolution(RigidTransform(r.numpy(), t.numpy()), max(obj, 0.0), flag)


def solve_weighted(c: CorrespondenceSet) -> ProcrustesSolution:
    return _solve(c, translation_only=False)


def solve_translation_only(c: CorrespondenceSet) -> ProcrustesSolution:
    return _solve(c, translation_only=True)


_GRAD_FIELDS = ("source_a", "target_a", "source_b", "target_b", "weights_a", "weights_b")


def procrustes_gradient(c: CorrespondenceSet, upstream, translation_only: bool = False) -> dict[str, np.ndarray]:
    """Pull a gradient on the 12 transform entries back to every input.

    ``upstream`` is laid out like ``RigidTransform.to_row()``: nine row-major
    rotation entries then three translation entries.
    """
    g = torch.as_tensor(np.asarray(upstream, dtype=np.float64).reshape(12))
    args = c.tensors(requires_grad=True)
    r, t, _ = weighted_procrustes(*args, translation_only=translation_only)
    out = torch.cat([r.reshape(9), t])
    grads = torch.autograd.grad(out, args, grad_outputs=g, allow_unused=True)
    return {
        name: (np.zeros(a.shape) if gr is None else gr.numpy())
        for name, a, gr in zip(_GRAD_FIELDS, args, grads)
    }
