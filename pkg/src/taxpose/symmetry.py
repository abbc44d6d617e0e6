"""PCA-based symmetry-breaking labels for rotationally symmetric objects.

Each label is the cosine between a point's offset from the centroid and the
normal of a bisecting plane, so labels always lie in [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CentroidCoincidence, DegenerateGeometry, LengthMismatch, ParallelReference
from .geometry import as_cloud


@dataclass(frozen=True, eq=False)
class PrincipalAxes:
    axes: np.ndarray  # (3, 3), rows are axes sorted by descending variance
    variances: np.ndarray


def _sign_fix(v: np.ndarray) -> np.ndarray:
    # first component that is not numerically zero is made positive
    for x in v:
        if abs(x) > 1e-12:
            return v if x > 0 else -v
    return v


def pca(cloud) -> PrincipalAxes:
    p = as_cloud(cloud)
    if p.shape[0] < 3:
        raise DegenerateGeometry("PCA needs at least three points")
    c = p - p.mean(axis=0)
    if np.abs(c).max() == 0:
        raise DegenerateGeometry("all points coincide")
    cov = c.T @ c / p.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    axes = np.array([_sign_fix(vecs[:, i]) for i in order])
    return PrincipalAxes(axes, vals)


def _unit_offsets(p: np.ndarray) -> np.ndarray:
    off = p - p.mean(axis=0)
    norm = np.linalg.norm(off, axis=1)
    if np.any(norm < 1e-12):
        raise CentroidCoincidence(f"point {int(np.argmin(norm))} lies on the centroid")
    return off / norm[:, None]


def labels_from_normal(cloud, normal) -> np.ndarray:
    s = np.asarray(normal, dtype=np.float64)
    lab = _unit_offsets(as_cloud(cloud)) @ (s / np.linalg.norm(s))
    return np.clip(lab, -1.0, 1.0)


def gripper_labels(cloud) -> np.ndarray:
    """Labels against the plane whose normal is the first principal axis."""
    return labels_from_normal(cloud, pca(cloud).axes[0])


def bottle_normal(rot_axis, reference) -> np.ndarray:
    n = np.cross(rot_axis, reference)
    norm = np.linalg.norm(n)
    if norm < 1e-9 * np.linalg.norm(rot_axis) * np.linalg.norm(reference):
        raise ParallelReference("reference direction is parallel to the symmetry axis")
    return n / norm


def bowl_normal(rot_axis, reference) -> np.ndarray:
    a = np.asarray(rot_axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    g = np.asarray(reference, dtype=np.float64)
    g = g / np.linalg.norm(g)
    w = g - (g @ a) * a
    norm = np.linalg.norm(w)
    if norm < 1e-9:
        raise ParallelReference("reference direction is parallel to the symmetry axis")
    return w / norm


def bottle_labels(cloud, reference_dir) -> np.ndarray:
    """Symmetry axis = largest principal axis; normal = axis x reference."""
    axis = pca(cloud).axes[0]
    return labels_from_normal(cloud, bottle_normal(axis, reference_dir))


def bowl_labels(cloud, reference_dir) -> np.ndarray:
    """Symmetry axis = smallest principal axis; normal = reference made orthogonal to it."""
    axis = pca(cloud).axes[2]
    return labels_from_normal(cloud, bowl_normal(axis, reference_dir))


def training_reference(cloud, gripper_centroid) -> np.ndarray:
    """Unit vector from the object's centroid toward the gripper's centroid."""
    v = np.asarray(gripper_centroid, dtype=np.float64) - as_cloud(cloud).mean(axis=0)
    return v / np.linalg.norm(v)


def inference_reference(rot_axis, seed=None) -> np.ndarray:
    """Random unit vector perpendicular to ``rot_axis``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a = np.asarray(rot_axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    while True:
        g = rng.standard_normal(3)
        w = g - (g @ a) * a
        n = np.linalg.norm(w)
        if n > 1e-6:
            return w / n


def augment_features(phi, labels) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if phi.shape[0] != labels.shape[0]:
        raise LengthMismatch(f"{labels.shape[0]} labels for {phi.shape[0]} feature rows")
    return np.concatenate([phi, labels[:, None]], axis=1)
