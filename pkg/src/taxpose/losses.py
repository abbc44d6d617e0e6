"""Displacement, correspondence and consistency losses.

Each squared-norm term is a per-point mean, so magnitudes do not depend on
cloud size. The torch variants are what training differentiates; the numpy
wrappers take :class:`RigidTransform` / :class:`CrossPoseEstimate` values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import RigidTransform, as_cloud
from .model import CrossPoseEstimate, TaxPoseModel, forward_torch


@dataclass(frozen=True)
class LossWeights:
    lambda_cons: float = 0.1
    lambda_corr: float = 1.0
    use_disp: bool = True

    def __post_init__(self):
        if self.lambda_cons < 0 or self.lambda_corr < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    disp: float
    corr: float
    cons: float
    total: float


def _msd(a, b):
    d = a - b
    return (d * d).sum(dim=1).mean()


def _fwd(r, t, p):
    return p @ r.T + t


def _inv(r, t, p):
    return (p - t) @ r


def disp_loss_torch(r, t, r_gt, t_gt, p_a, p_b):
    return _msd(_fwd(r, t, p_a), _fwd(r_gt, t_gt, p_a)) + _msd(_inv(r, t, p_b), _inv(r_gt, t_gt, p_b))


def corr_loss_torch(vt_a, vt_b, r_gt, t_gt, p_a, p_b):
    return _msd(vt_a, _fwd(r_gt, t_gt, p_a)) + _msd(vt_b, _inv(r_gt, t_gt, p_b))


def combined_loss_torch(w: LossWeights, out: dict, r_gt, t_gt, p_a, p_b):
    """Returns ``(total, disp, corr, cons)`` tensors. ``r_gt=None`` skips terms needing ground truth."""
    r, t = out["rotation"], out["translation"]
    vt_a, vt_b = out["corrected_a"], out["corrected_b"]
    zero = torch.zeros((), dtype=torch.float64)
    cons = corr_loss_torch(vt_a, vt_b, r, t, p_a, p_b)
    if r_gt is None:
        disp = corr = zero
    else:
        disp = disp_loss_torch(r, t, r_gt, t_gt, p_a, p_b)
        corr = corr_loss_torch(vt_a, vt_b, r_gt, t_gt, p_a, p_b)
    total = w.lambda_cons * cons + w.lambda_corr * corr
    if w.use_disp:
        total = disp + total
    return total, disp, corr, cons


def _tt(t: RigidTransform):
    return torch.from_numpy(np.array(t.rotation)), torch.from_numpy(np.array(t.translation))


def _c(p):
    return torch.from_numpy(np.array(as_cloud(p)))


def point_displacement_loss(t_pred: RigidTransform, t_gt: RigidTransform, p_a, p_b) -> float:
    return float(disp_loss_torch(*_tt(t_pred), *_tt(t_gt), _c(p_a), _c(p_b)))


def direct_correspondence_loss(est: CrossPoseEstimate, t_gt: RigidTransform, p_a, p_b) -> float:
    return float(corr_loss_torch(_c(est.corrected_a), _c(est.corrected_b), *_tt(t_gt), _c(p_a), _c(p_b)))


def consistency_loss(est: CrossPoseEstimate, p_a, p_b) -> float:
    return float(corr_loss_torch(_c(est.corrected_a), _c(est.corrected_b), *_tt(est.transform), _c(p_a), _c(p_b)))


def combined_loss(w: LossWeights, est: CrossPoseEstimate, t_gt: RigidTransform, p_a, p_b) -> LossBreakdown:
    disp = point_displacement_loss(est.transform, t_gt, p_a, p_b)
    corr = direct_correspondence_loss(est, t_gt, p_a, p_b)
    cons = consistency_loss(est, p_a, p_b)
    return breakdown(w, disp, corr, cons)


def breakdown(w: LossWeights, disp: float, corr: float, cons: float) -> LossBreakdown:
    total = w.lambda_cons * cons + w.lambda_corr * corr
    if w.use_disp:
        total = disp + total
    return LossBreakdown(disp, corr, cons, total)


def batch_loss_torch(params, model: TaxPoseModel, batch, w: LossWeights):
    """Mean combined loss over ``batch``; items are dicts with tensors
    ``p_a, p_b`` and optionally ``r_gt, t_gt, goal, labels_a, labels_b``.

    Returns ``(total_tensor, [LossBreakdown per item])``.
    """
    totals, parts = [], []
    for item in batch:
        out = forward_torch(
            params, model.config, item["p_a"], item["p_b"], item.get("goal"),
            item.get("labels_a"), item.get("labels_b"),
        )
        total, disp, corr, cons = combined_loss_torch(
            w, out, item.get("r_gt"), item.get("t_gt"), item["p_a"], item["p_b"]
        )
        totals.append(total)
        parts.append(breakdown(w, float(disp.detach()), float(corr.detach()), float(cons.detach())))
    return torch.stack(totals).mean(), parts


def loss_gradient(model: TaxPoseModel, batch, w: LossWeights, params=None):
    """Reverse-mode gradient of the mean batch loss w.r.t. every parameter.

    Returns ``(grads: dict[str, Tensor], loss: float, parts)``.
    """
    base = params if params is not None else model.params
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in base.items()}
    total, parts = batch_loss_torch(leaves, model, batch, w)
    names = list(leaves)
    grads = torch.autograd.grad(total, [leaves[k] for k in names], allow_unused=True)
    out = {k: (torch.zeros_like(leaves[k]) if g is None else g.detach()) for k, g in zip(names, grads)}
    return out, float(total.detach()), parts


def make_item(p_a, p_b, t_gt: RigidTransform | None = None, goal=None, labels_a=None, labels_b=None) -> dict:
    item = {"p_a": _c(p_a), "p_b": _c(p_b)}
    if t_gt is not None:
        item["r_gt"], item["t_gt"] = _tt(t_gt)
    if goal is not None:
        item["goal"] = torch.tensor(np.array(goal, dtype=np.float64))
    if labels_a is not None:
        item["labels_a"], item["labels_b"] = labels_a, labels_b
    return item
