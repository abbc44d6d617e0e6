"""Plain-text and JSON persistence: point clouds, transforms, checkpoints, datasets.

Floats are written with ``repr`` so every value round-trips bit-exactly.
All writes go to a temporary file in the target directory and are renamed
into place.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointFormatError
from .geometry import RigidTransform, as_cloud
from .model import ModelConfig, TaxPoseModel

FORMAT_VERSION = 1


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# Point clouds


def format_cloud(cloud, labels=None) -> str:
    p = as_cloud(cloud)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        if labels.shape[0] != p.shape[0]:
            raise ValueError(f"{labels.shape[0]} labels for {p.shape[0]} points")
    lines = []
    for i, row in enumerate(p):
        fields = [_num(v) for v in row]
        if labels is not None:
            fields.append(_num(labels[i]))
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def parse_cloud(text: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Parse ``x y z [label]`` lines; ``#`` starts a comment. Returns (points, labels)."""
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = [float(v) for v in line.split()]
        except ValueError as exc:
            raise ValueError(f"line {n}: {exc}") from exc
        if len(vals) not in (3, 4):
            raise ValueError(f"line {n}: expected 3 or 4 fields, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise ValueError("point cloud file has no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError("mixed 3- and 4-column rows")
    arr = np.array(rows, dtype=np.float64)
    labels = arr[:, 3].copy() if arr.shape[1] == 4 else None
    return as_cloud(arr[:, :3]), labels


def write_cloud(path, cloud, labels=None) -> None:
    atomic_write(path, format_cloud(cloud, labels))


def read_cloud(path) -> tuple[np.ndarray, np.ndarray | None]:
    return parse_cloud(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Transforms


def format_transform(t: RigidTransform) -> str:
    return " ".join(_num(v) for v in t.to_row())


def parse_transform(line: str) -> RigidTransform:
    fields = line.split()
    if len(fields) != 12:
        raise ValueError(f"transform line needs 12 fields, got {len(fields)}")
    return RigidTransform.from_row([float(v) for v in fields])


# --------------------------------------------------------------------------
# Checkpoints


def checkpoint_dict(model: TaxPoseModel, goal_set=None) -> dict:
    cfg = model.config_dict()
    extra = {"goal_set": list(goal_set)} if goal_set else {}
    return extra | {
        "format_version": FORMAT_VERSION,
        "embed_dim": cfg.pop("embed_dim"),
        "goal_context_dim": cfg.pop("goal_context_dim"),
        "config": cfg,
        "params": {k: v.detach().tolist() for k, v in sorted(model.params.items())},
    }


def model_from_checkpoint(d: dict) -> TaxPoseModel:
    if not isinstance(d, dict) or d.get("format_version") != FORMAT_VERSION:
        got = d.get("format_version") if isinstance(d, dict) else None
        raise CheckpointFormatError(f"unsupported checkpoint format_version {got!r}; expected {FORMAT_VERSION}")
    try:
        cfg = ModelConfig(embed_dim=int(d["embed_dim"]), goal_context_dim=int(d["goal_context_dim"]),
                          **d.get("config", {}))
        params = {k: torch.tensor(v, dtype=torch.float64) for k, v in d["params"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint: {exc}") from exc
    expected = TaxPoseModel.initialize(cfg).params
    if set(expected) != set(params):
        raise CheckpointFormatError("checkpoint parameter names do not match its configuration")
    for k, v in expected.items():
        if params[k].shape != v.shape:
            raise CheckpointFormatError(f"parameter {k} has shape {tuple(params[k].shape)}, expected {tuple(v.shape)}")
    return TaxPoseModel(cfg, params)


def save_checkpoint(path, model: TaxPoseModel, goal_set=None) -> None:
    # float repr in JSON is shortest-round-trip, so reloading is bit-exact
    atomic_write(path, json.dumps(checkpoint_dict(model, goal_set)) + "\n")


def read_checkpoint(path) -> tuple[TaxPoseModel, list | None]:
    """Returns the model and the goal names stored with it (if any)."""
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"checkpoint is not valid JSON: {exc}") from exc
    goals = d.get("goal_set") if isinstance(d, dict) else None
    return model_from_checkpoint(d), goals


def load_checkpoint(path) -> TaxPoseModel:
    return read_checkpoint(path)[0]


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Datasets


def write_dataset(out_dir, spec, demos_by_goal: dict) -> None:
    """Layout: ``spec.json`` and ``demos/<goal>/<k>_a.xyz`` / ``<k>_b.xyz``."""
    out = Path(out_dir)
    write_json(out / "spec.json", spec.to_json())
    for goal, demos in demos_by_goal.items():
        for k, d in enumerate(demos):
            write_cloud(out / "demos" / goal / f"{k}_a.xyz", d.cloud_a)
            write_cloud(out / "demos" / goal / f"{k}_b.xyz", d.cloud_b)


def read_dataset(path):
    """Returns ``(spec, {goal: [DemoPair, ...]})``."""
    from .tasks import DemoPair, TaskSpec

    root = Path(path)
    spec = TaskSpec.from_json(json.loads((root / "spec.json").read_text(encoding="utf-8")))
    demos = {}
    for goal in spec.goal_set:
        gdir = root / "demos" / goal
        ks = sorted(int(p.name[:-6]) for p in gdir.glob("*_a.xyz")) if gdir.is_dir() else []
        gi = spec.one_hot(goal) if spec.goal_conditioned else None
        demos[goal] = [
            DemoPair(read_cloud(gdir / f"{k}_a.xyz")[0], read_cloud(gdir / f"{k}_b.xyz")[0], goal, gi)
            for k in ks
        ]
    return spec, demos
