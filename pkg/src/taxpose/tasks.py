"""Synthetic relative-placement tasks, demonstrations and evaluation.

Shapes are surface samples of small parametric primitives (boxes, cylinders,
tori, and unions of them). A :class:`TaskSpec` places an action shape relative
to an anchor shape for each named goal; demonstrations are those placements
with fresh surface samples, and training samples re-pose each object by an
independent random rigid transform.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import ConvexHull

from .errors import NumericalError, UnknownGoal
from .geometry import (
    RigidTransform,
    apply,
    as_cloud,
    compose,
    diameter,
    invert,
    random_transform,
    rotation_geodesic_error,
    rot_z,
    translation_error,
)

# --------------------------------------------------------------------------
# Procedural shapes


def _box_surface(rng, n, lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[2], ext[0] * ext[1], ext[0] * ext[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * ext
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
    return pts


def _cylinder_surface(rng, n, radius, height, base=(0.0, 0.0, 0.0)):
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    kind = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(kind == 0, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(kind == 0, rng.uniform(0, height, n), np.where(kind == 1, 0.0, height))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1) + np.asarray(base, float)


def _torus_surface(rng, n, major, minor, center=(0.0, 0.0, 0.0)):
    u = rng.uniform(0, 2 * np.pi, n)
    v = rng.uniform(0, 2 * np.pi, n)
    rr = major + minor * np.cos(v)
    return np.stack([rr * np.cos(u), rr * np.sin(u), minor * np.sin(v)], axis=1) + np.asarray(center, float)


def _parts(rng, n, parts):
    """Allocate ``n`` points to parts proportionally to their weights."""
    w = np.array([p[0] for p in parts], float)
    counts = np.floor(n * w / w.sum()).astype(int)
    counts[np.argmax(w)] += n - counts.sum()
    return np.concatenate([fn(rng, c) for (_, fn), c in zip(parts, counts) if c > 0])


def _shape_parts(d: dict):
    kind = d["kind"]
    if kind == "box":
        s = np.asarray(d.get("size", (0.4, 0.3, 0.2)), float)
        return [(1.0, lambda rng, n: _box_surface(rng, n, -s / 2, s / 2))]
    if kind == "cylinder":
        r, h = d.get("radius", 0.1), d.get("height", 0.5)
        return [(1.0, lambda rng, n: _cylinder_surface(rng, n, r, h, (0, 0, -h / 2)))]
    if kind == "ring_rack":
        # a ring held on one side by a post, over a base plate
        big, tube, z = d.get("radius", 0.22), d.get("tube", 0.03), d.get("ring_height", 0.5)
        post_x = big + tube
        return [
            (2.0, lambda rng, n: _torus_surface(rng, n, big, tube, (0, 0, z))),
            (1.2, lambda rng, n: _box_surface(rng, n, (post_x - 0.02, -0.02, 0.0), (post_x + 0.02, 0.02, z))),
            (1.0, lambda rng, n: _box_surface(rng, n, (post_x - 0.12, -0.1, -0.03), (post_x + 0.12, 0.1, 0.0))),
        ]
    if kind == "l_peg":
        # long vertical bar with a foot at its top, pointing along +x
        length, w, foot = d.get("length", 0.8), d.get("width", 0.05), d.get("foot", 0.28)
        return [
            (2.0, lambda rng, n: _box_surface(rng, n, (-w / 2, -w / 2, -length / 2), (w / 2, w / 2, length / 2))),
            (1.0, lambda rng, n: _box_surface(rng, n, (w / 2, -w / 2, length / 2 - w), (w / 2 + foot, w / 2, length / 2))),
        ]
    if kind == "u_rack":
        # base with two posts of different heights
        return [
            (1.5, lambda rng, n: _box_surface(rng, n, (-0.3, -0.05, 0.0), (0.3, 0.05, 0.06))),
            (1.2, lambda rng, n: _box_surface(rng, n, (-0.3, -0.05, 0.06), (-0.22, 0.05, 0.5))),
            (0.8, lambda rng, n: _box_surface(rng, n, (0.22, -0.05, 0.06), (0.3, 0.05, 0.3))),
        ]
    if kind == "notched_block":
        # L-shaped block: no rotational symmetry
        return [
            (2.0, lambda rng, n: _box_surface(rng, n, (-0.1, -0.06, -0.05), (0.1, 0.06, 0.0))),
            (1.0, lambda rng, n: _box_surface(rng, n, (-0.1, -0.06, 0.0), (-0.02, 0.06, 0.08))),
        ]
    if kind == "tray":
        # open box with a handle on one side
        lx, ly, h = 0.25, 0.18, 0.12
        return [
            (2.0, lambda rng, n: _box_surface(rng, n, (-lx, -ly, -0.01), (lx, ly, 0.0))),
            (1.0, lambda rng, n: _box_surface(rng, n, (-lx, -ly, 0.0), (-lx + 0.01, ly, h))),
            (1.0, lambda rng, n: _box_surface(rng, n, (lx - 0.01, -ly, 0.0), (lx, ly, h))),
            (0.8, lambda rng, n: _box_surface(rng, n, (-lx, -ly, 0.0), (lx, -ly + 0.01, h))),
            (0.8, lambda rng, n: _box_surface(rng, n, (-lx, ly - 0.01, 0.0), (lx, ly, h))),
            (0.6, lambda rng, n: _box_surface(rng, n, (lx, -0.04, h - 0.03), (lx + 0.1, 0.04, h))),
        ]
    raise ValueError(f"unknown shape kind {kind!r}")


def generate_shape(descriptor: dict, n_points: int, seed) -> np.ndarray:
    """Deterministic surface sample of a procedural shape."""
    if n_points < 8:
        raise ValueError("shapes need at least 8 points")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = _parts(rng, n_points, _shape_parts(descriptor))
    pts = pts[rng.permutation(n_points)]
    pts.setflags(write=False)
    return pts


def shape_bounds(descriptor: dict) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounding box of a dense sample of the shape."""
    p = generate_shape(descriptor, 4096, 0)
    return p.min(axis=0), p.max(axis=0)


# --------------------------------------------------------------------------
# Tasks and demonstrations


@dataclass(frozen=True)
class TaskSpec:
    name: str
    action_shape: dict
    anchor_shape: dict
    goal_set: tuple
    goal_poses: dict  # goal -> RigidTransform (action canonical frame -> anchor frame)
    off_hull: dict = field(default_factory=dict)  # goal -> bool
    hull_margin: dict = field(default_factory=dict)  # goal -> float
    n_points_a: int = 64
    n_points_b: int = 64

    def __post_init__(self):
        if set(self.goal_poses) != set(self.goal_set):
            raise ValueError("goal_poses keys must equal goal_set")
        if len(set(self.goal_set)) != len(self.goal_set):
            raise ValueError("duplicate goal names")
        _shape_parts(self.action_shape)
        _shape_parts(self.anchor_shape)
        if min(self.n_points_a, self.n_points_b) < 8:
            raise ValueError("clouds need at least 8 points")

    @property
    def goal_conditioned(self) -> bool:
        return len(self.goal_set) > 1

    def goal_index(self, goal: str) -> int:
        if goal not in self.goal_set:
            raise UnknownGoal(f"goal {goal!r} not in {list(self.goal_set)}")
        return self.goal_set.index(goal)

    def one_hot(self, goal: str) -> np.ndarray:
        v = np.zeros(len(self.goal_set))
        v[self.goal_index(goal)] = 1.0
        return v

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "action_shape": self.action_shape,
            "anchor_shape": self.anchor_shape,
            "goal_set": list(self.goal_set),
            "goal_poses": {g: self.goal_poses[g].to_row().tolist() for g in self.goal_set},
            "off_hull": {g: bool(self.off_hull.get(g, False)) for g in self.goal_set},
            "hull_margin": {g: float(self.hull_margin.get(g, 0.0)) for g in self.goal_set},
            "n_points_a": self.n_points_a,
            "n_points_b": self.n_points_b,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TaskSpec":
        try:
            goals = tuple(d["goal_set"])
            return cls(
                name=str(d["name"]),
                action_shape=dict(d["action_shape"]),
                anchor_shape=dict(d["anchor_shape"]),
                goal_set=goals,
                goal_poses={g: RigidTransform.from_row(d["goal_poses"][g]) for g in goals},
                off_hull={g: bool(v) for g, v in d.get("off_hull", {}).items()},
                hull_margin={g: float(v) for g, v in d.get("hull_margin", {}).items()},
                n_points_a=int(d.get("n_points_a", 64)),
                n_points_b=int(d.get("n_points_b", 64)),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid task spec: {exc}") from exc


@dataclass(frozen=True, eq=False)
class DemoPair:
    cloud_a: np.ndarray
    cloud_b: np.ndarray
    goal: str
    goal_index: np.ndarray | None = None
    symmetry_labels: tuple | None = None


@dataclass(frozen=True, eq=False)
class TrainingSample:
    posed_a: np.ndarray
    posed_b: np.ndarray
    t_alpha: RigidTransform
    t_beta: RigidTransform
    t_gt: RigidTransform
    goal: str = ""
    goal_index: np.ndarray | None = None


def _translate(x, y, z):
    return RigidTransform(np.eye(3), np.array([x, y, z], float))


def builtin_tasks() -> dict[str, TaskSpec]:
    peg = {"kind": "l_peg"}
    rack = {"kind": "ring_rack"}
    block = {"kind": "notched_block"}
    tray = {"kind": "tray"}
    block_goals = {
        "in": _translate(0.0, 0.0, 0.06),
        "on": RigidTransform(rot_z(np.pi / 2), np.array([0.0, 0.0, 0.22])),
        "left": _translate(0.0, 0.42, 0.06),
        "right": RigidTransform(rot_z(np.pi), np.array([0.0, -0.42, 0.06])),
    }
    tasks = {
        # the peg hangs through the ring, sticking far out of the rack's hull
        "peg-in-ring": TaskSpec(
            "peg-in-ring", peg, rack, ("in",),
            {"in": RigidTransform(rot_z(np.pi / 2), np.array([0.0, 0.0, 0.65]))},
            off_hull={"in": True}, hull_margin={"in": 0.2}, n_points_a=128, n_points_b=128,
        ),
        "block-in-box": TaskSpec("block-in-box", block, tray, ("in",), {"in": block_goals["in"]}),
        "block-on-box": TaskSpec("block-on-box", block, tray, ("on",), {"on": block_goals["on"]}),
        "block-box-gc": TaskSpec(
            "block-box-gc", block, tray, ("in", "on", "left", "right"), block_goals,
            off_hull={"on": True, "left": True, "right": True},
            hull_margin={"on": 0.05, "left": 0.1, "right": 0.1},
        ),
    }
    return tasks


def make_demo(spec: TaskSpec, goal: str, seed) -> DemoPair:
    """Demonstration in goal configuration (the cross-pose is the identity)."""
    spec.goal_index(goal)
    rng = np.random.default_rng(seed)
    a = generate_shape(spec.action_shape, spec.n_points_a, rng)
    b = generate_shape(spec.anchor_shape, spec.n_points_b, rng)
    placed = apply(spec.goal_poses[goal], a)
    gi = spec.one_hot(goal) if spec.goal_conditioned else None
    return DemoPair(placed, b, goal, gi)


def canonical_demo_clouds(spec: TaskSpec, seed) -> tuple[np.ndarray, np.ndarray]:
    """The unplaced action and anchor samples that ``make_demo(spec, g, seed)`` uses."""
    rng = np.random.default_rng(seed)
    a = generate_shape(spec.action_shape, spec.n_points_a, rng)
    b = generate_shape(spec.anchor_shape, spec.n_points_b, rng)
    return a, b


def sample_training_pair(demo: DemoPair, translation_scale: float = 1.0, seed=None,
                         yaw_only: bool = False, rotate: bool = True,
                         t_alpha: RigidTransform | None = None, t_beta: RigidTransform | None = None) -> TrainingSample:
    """Re-pose each demo cloud by an independent random transform."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed

    def draw():
        if not rotate:
            return RigidTransform(np.eye(3), rng.uniform(-1, 1, 3) * translation_scale)
        return random_transform(rng, translation_scale, yaw_only)

    ta = t_alpha if t_alpha is not None else draw()
    tb = t_beta if t_beta is not None else draw()
    return TrainingSample(
        posed_a=apply(ta, demo.cloud_a),
        posed_b=apply(tb, demo.cloud_b),
        t_alpha=ta,
        t_beta=tb,
        t_gt=compose(tb, invert(ta)),
        goal=demo.goal,
        goal_index=demo.goal_index,
    )


# --------------------------------------------------------------------------
# Convex-hull geometry (for residual-necessity checks)


def hull_violation(points, hull_cloud) -> np.ndarray:
    """Per-point lower bound on the distance from ``points`` to ``hull(hull_cloud)``.

    The largest signed facet-plane distance; zero for points inside. It is a
    lower bound because the hull lies inside every facet half-space.
    """
    h = ConvexHull(as_cloud(hull_cloud))
    eq = h.equations  # unit outward normals: n . x + b <= 0 inside
    d = as_cloud(points) @ eq[:, :3].T + eq[:, 3]
    return np.maximum(d.max(axis=1), 0.0)


def hull_corr_lower_bound(target_a, hull_b, target_b, hull_a) -> float:
    """Lower bound on the direct correspondence loss for any model whose
    corrected points stay inside the opposing convex hulls."""
    va = hull_violation(target_a, hull_b)
    vb = hull_violation(target_b, hull_a)
    return float(np.mean(va**2) + np.mean(vb**2))


def verify_relplace(spec: TaskSpec, demo: DemoPair, seed, common: RigidTransform | None = None,
                    tol: float = 1e-10) -> bool:
    """Check that ``demo`` (optionally moved by a common transform) realizes the goal.

    The relative pose is re-estimated from the known point correspondences with
    the canonical samples and compared with the task's goal pose.
    """
    from .procrustes import CorrespondenceSet, solve_weighted

    a0, b0 = canonical_demo_clouds(spec, seed)
    ca, cb = demo.cloud_a, demo.cloud_b
    if common is not None:
        ca, cb = apply(common, ca), apply(common, cb)

    def fit(src, dst):
        # one-sided fit: use the same correspondences on both sides
        return solve_weighted(CorrespondenceSet.uniform(src, dst, dst, src)).transform

    pose_a = fit(a0, ca)
    pose_b = fit(b0, cb)
    rel = compose(invert(pose_b), pose_a)
    return rel.allclose(spec.goal_poses[demo.goal], atol=tol)


# --------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    mean_rot_error: float
    median_rot_error: float
    mean_trans_error: float
    median_trans_error: float
    success_rate: float
    theta_max: float
    d_max: float
    n_samples: int
    n_solver_failures: int
    per_goal: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _summary(rot, trans, ok):
    if not rot:
        return dict(mean_rot_error=float("nan"), median_rot_error=float("nan"),
                    mean_trans_error=float("nan"), median_trans_error=float("nan"),
                    success_rate=0.0)
    return dict(
        mean_rot_error=float(np.mean(rot)),
        median_rot_error=float(statistics.median(rot)),
        mean_trans_error=float(np.mean(trans)),
        median_trans_error=float(statistics.median(trans)),
        success_rate=float(np.mean(ok)),
    )


def model_predictor(model, labels_fn: Callable | None = None):
    from .model import forward

    def predict(s: TrainingSample) -> RigidTransform:
        labels = labels_fn(s) if labels_fn else (None, None)
        return forward(model, s.posed_a, s.posed_b, s.goal_index, *labels).transform

    return predict


def evaluate(predictor, samples, theta_max: float = np.deg2rad(5.0), d_max: float = 0.05) -> EvalReport:
    """Score a model (or any ``sample -> RigidTransform`` callable) on samples.

    ``theta_max`` is compared with the halved geodesic metric. Solver
    failures count as unsuccessful and are tallied separately.
    """
    if not samples:
        raise ValueError("evaluation needs at least one sample")
    if not callable(predictor):
        predictor = model_predictor(predictor)
    rows = []
    failures = 0
    for s in samples:
        try:
            t = predictor(s)
        except NumericalError:
            failures += 1
            rows.append((s.goal, None, None, False))
            continue
        er = rotation_geodesic_error(t.rotation, s.t_gt.rotation)
        et = translation_error(t.translation, s.t_gt.translation)
        rows.append((s.goal, er, et, er < theta_max and et < d_max))

    def collect(sel):
        rot = [r[1] for r in sel if r[1] is not None]
        trans = [r[2] for r in sel if r[2] is not None]
        return _summary(rot, trans, [r[3] for r in sel])

    per_goal = {}
    for g in sorted({r[0] for r in rows}):
        sel = [r for r in rows if r[0] == g]
        per_goal[g] = collect(sel) | {"n_samples": len(sel)}
    return EvalReport(**collect(rows), theta_max=float(theta_max), d_max=float(d_max),
                      n_samples=len(samples), n_solver_failures=failures, per_goal=per_goal)


def anchor_diameter(spec: TaskSpec) -> float:
    return diameter(generate_shape(spec.anchor_shape, 512, 0))
