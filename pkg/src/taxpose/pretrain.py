"""Rotation-invariance pretraining of an encoder with a geometry-weighted InfoNCE."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateGeometry
from .geometry import apply, as_cloud, random_transform
from .model import ModelConfig, encode_torch


@dataclass
class PretrainConfig:
    shapes: list = field(default_factory=list)
    lambda_geo: float = 10.0
    steps: int = 500
    learning_rate: float = 2.0
    seed: int = 0
    side: str = "a"
    translation_scale: float = 1.0
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if self.lambda_geo <= 0:
            raise ValueError("lambda_geo must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def geometric_weight_torch(p: torch.Tensor, lambda_geo: float) -> torch.Tensor:
    n = p.shape[0]
    if n < 2:
        raise DegenerateGeometry("geometric weights need at least two points")
    dist = torch.cdist(p, p)
    th = torch.tanh(lambda_geo * dist)
    eye = torch.eye(n, dtype=torch.bool)
    mu = th.masked_fill(eye, -1.0).max()
    if not mu > 0:
        raise DegenerateGeometry("all points coincide, so the weight normalizer is zero")
    return torch.where(eye, torch.ones_like(th), th / mu)


def geometric_weight_matrix(p, lambda_geo: float = 10.0) -> np.ndarray:
    """``d_ij = tanh(lambda |p_i - p_j|) / mu`` off the diagonal, 1 on it.

    ``mu`` is the largest off-diagonal ``tanh`` value of this cloud.
    """
    return geometric_weight_torch(torch.from_numpy(np.array(as_cloud(p))), lambda_geo).numpy()


def weighted_infonce_torch(phi, psi, d):
    logits = phi @ psi.T  # logits[i, j] = phi_i . psi_j
    pos = torch.diagonal(logits)
    return -(pos - torch.logsumexp(d * logits, dim=1)).sum()


def weighted_infonce(phi, psi, d) -> float:
    """``-sum_i log(exp(phi_i.psi_i) / sum_j exp(d_ij phi_i.psi_j))``."""
    t = lambda x: torch.tensor(np.array(x, dtype=np.float64))  # noqa: E731
    return float(weighted_infonce_torch(t(phi), t(psi), t(d)))


def feature_drift(params, cfg: ModelConfig, shapes, side="a", trials=20, seed=12345) -> float:
    """Mean ``|phi_i - psi_i|`` between a cloud and a randomly transformed copy."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for k in range(trials):
            p = shapes[k % len(shapes)]
            q = apply(random_transform(rng), p)
            phi = encode_torch(params, cfg, side, torch.from_numpy(np.array(p)))
            psi = encode_torch(params, cfg, side, torch.from_numpy(np.array(q)))
            total += float(torch.linalg.norm(phi - psi, dim=1).sum())
            count += len(p)
    return total / count


def pretrain_encoder(cfg: PretrainConfig, params: dict, model_cfg: ModelConfig):
    """Gradient descent (norm-clipped, no momentum) on the per-point mean contrastive loss.

    Only the encoder tensors of ``cfg.side`` are updated; a new dict is
    returned along with the raw per-step loss trace and its running minimum.
    """
    if not cfg.shapes:
        raise ValueError("pretraining needs at least one shape")
    if model_cfg.goal_context_dim:
        raise ValueError("pretraining is defined for encoders without goal context")
    rng = np.random.default_rng(cfg.seed)
    prefix = f"enc_{cfg.side}."
    params = {k: v.detach().clone() for k, v in params.items()}
    names = [k for k in params if k.startswith(prefix)]
    weights = [geometric_weight_torch(torch.from_numpy(np.array(as_cloud(s))), cfg.lambda_geo) for s in cfg.shapes]
    trace = []
    for _ in range(cfg.steps):
        j = int(rng.integers(len(cfg.shapes)))
        p = as_cloud(cfg.shapes[j])
        q = apply(random_transform(rng, cfg.translation_scale), p)
        leaves = {k: params[k].requires_grad_(True) for k in names}
        local = {**params, **leaves}
        phi = encode_torch(local, model_cfg, cfg.side, torch.from_numpy(np.array(p)))
        psi = encode_torch(local, model_cfg, cfg.side, torch.from_numpy(np.array(q)))
        loss = weighted_infonce_torch(phi, psi, weights[j]) / len(p)
        grads = torch.autograd.grad(loss, [leaves[k] for k in names])
        norm = float(torch.sqrt(sum((g * g).sum() for g in grads)))
        scale = min(1.0, cfg.max_grad_norm / norm) if norm > 0 else 1.0
        with torch.no_grad():
            for k, g in zip(names, grads):
                params[k] = (params[k] - cfg.learning_rate * scale * g).detach()
        trace.append(float(loss.detach()))
    smoothed = np.minimum.accumulate(np.array(trace)).tolist()
    return params, trace, smoothed
