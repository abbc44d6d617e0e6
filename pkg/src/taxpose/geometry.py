"""Rigid transforms, point-cloud primitives and pose error metrics.

Point clouds are plain ``(N, 3)`` float64 arrays. Rotations are ``(3, 3)``
matrices. Everything here is pure and returns fresh (read-only) arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def as_cloud(points) -> np.ndarray:
    """Validate and return an ``(N, 3)`` float64 cloud with N >= 1."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
        raise ValueError(f"expected a (N, 3) point cloud with N >= 1, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("point cloud contains non-finite coordinates")
    return p


def is_rotation(r, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(np.abs(r.T @ r - np.eye(3)).max() < tol and abs(np.linalg.det(r) - 1.0) < tol)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3): ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, *t) -> "RigidTransform":
        if len(t) == 1:
            t = t[0]
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_row(self) -> np.ndarray:
        """12 reals: row-major rotation followed by translation."""
        return np.concatenate([self.rotation.reshape(9), self.translation])

    @classmethod
    def from_row(cls, row) -> "RigidTransform":
        row = np.asarray(row, dtype=np.float64).reshape(-1)
        if row.shape != (12,):
            raise ValueError(f"a transform row has 12 reals, got {row.shape[0]}")
        return cls(row[:9].reshape(3, 3), row[9:])

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return compose(self, other)
        return apply(self, other)

    def allclose(self, other: "RigidTransform", atol: float = 1e-12) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def apply(t: RigidTransform, cloud) -> np.ndarray:
    p = as_cloud(cloud)
    return _frozen(p @ t.rotation.T + t.translation)


def rot_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, theta: float) -> np.ndarray:
    """Rodrigues' formula."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_rotation(seed=None) -> np.ndarray:
    """Uniform sample from SO(3) via a normalized 4D Gaussian quaternion.

    ``seed`` may be an int or a ``numpy.random.Generator`` (which is advanced).
    """
    rng = _rng(seed)
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    return quaternion_to_matrix(q)


def random_yaw(seed=None) -> np.ndarray:
    rng = _rng(seed)
    return rot_z(rng.uniform(-np.pi, np.pi))


def random_transform(seed=None, translation_scale: float = 1.0, yaw_only: bool = False) -> RigidTransform:
    rng = _rng(seed)
    r = random_yaw(rng) if yaw_only else random_rotation(rng)
    t = rng.uniform(-1.0, 1.0, size=3) * translation_scale
    return RigidTransform(r, t)


def rotation_geodesic_error(pred, gt) -> float:
    """Rotation error ``0.5 * arccos((tr(pred^T gt) - 1) / 2)``.

    The leading one-half is deliberate: the metric reports half of the usual
    geodesic angle, so a rotation by theta scores theta / 2.
    """
    c = (np.trace(np.asarray(pred).T @ np.asarray(gt)) - 1.0) / 2.0
    return 0.5 * float(np.arccos(np.clip(c, -1.0, 1.0)))


def translation_error(pred, gt) -> float:
    return float(np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)))


def centroid(cloud) -> np.ndarray:
    return _frozen(as_cloud(cloud).mean(axis=0))


def center(cloud) -> tuple[np.ndarray, np.ndarray]:
    """Return the zero-mean cloud and the mean that was removed."""
    p = as_cloud(cloud)
    mu = p.mean(axis=0)
    return _frozen(p - mu), _frozen(mu)


def diameter(cloud) -> float:
    """Largest pairwise distance."""
    p = as_cloud(cloud)
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    return float(d.max())


def rotation_angle_between(r1, r2) -> float:
    """Full geodesic angle between two rotations, accurate near zero.

    Uses ``atan2(|axis|, cos)`` on the relative rotation instead of arccos of
    the trace, which loses about half the significant digits for small angles.
    """
    d = np.asarray(r1).T @ np.asarray(r2)
    sin_part = 0.5 * np.linalg.norm([d[2, 1] - d[1, 2], d[0, 2] - d[2, 0], d[1, 0] - d[0, 1]])
    cos_part = 0.5 * (np.trace(d) - 1.0)
    return float(np.arctan2(sin_part, cos_part))
