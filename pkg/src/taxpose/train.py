"""Training loop, optimizer and ablation runner."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .errors import NearDegenerateSpectrum, NonFiniteLoss
from .geometry import RigidTransform
from .losses import LossBreakdown, LossWeights, batch_loss_torch, make_item
from .model import ModelConfig, TaxPoseModel, init_params
from .tasks import (
    DemoPair,
    EvalReport,
    TaskSpec,
    anchor_diameter,
    evaluate,
    make_demo,
    sample_training_pair,
)

ABLATIONS = (
    "no_disp", "no_corr", "no_cons", "scaled_combo", "no_residual",
    "unweighted_svd", "dot_product", "mlp_cross", "dim_small", "no_pretrain",
)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    embed_dim: int = 32
    variant: str = "attention"
    residuals_enabled: bool = True
    weighted_svd_enabled: bool = True
    symmetry_labels: bool = False
    pretrained_encoder: str | None = None
    n_demos: int = 10
    yaw_only: bool = False
    translation_scale: float | None = None  # None: one anchor diameter
    eval_every: int = 0
    eval_samples: int = 20
    subsample: int | None = None  # random points per cloud per step (None: all)
    jitter: float = 0.0  # std of per-point Gaussian noise added to demo clouds each step
    lr_schedule: str = "constant"  # or "cosine": decay to zero over the run

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_demos < 1:
            raise ValueError("n_demos must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)

    def model_config(self, goal_context_dim: int = 0) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim,
            goal_context_dim=goal_context_dim,
            variant=self.variant,
            residuals_enabled=self.residuals_enabled,
            weighted_svd_enabled=self.weighted_svd_enabled,
            symmetry_labels=self.symmetry_labels,
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# Adam as a pure function


@dataclass(frozen=True)
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(0, {k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})

    def to_json(self) -> dict:
        return {"step": self.step,
                "m": {k: t.tolist() for k, t in self.m.items()},
                "v": {k: t.tolist() for k, t in self.v.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "AdamState":
        f = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731
        return cls(int(d["step"]), {k: f(x) for k, x in d["m"].items()}, {k: f(x) for k, x in d["v"].items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1 - beta1**step
    c2 = 1 - beta2**step
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        new_p[k] = p - lr * (m / c1) / (torch.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(step, new_m, new_v)


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: TaxPoseModel
    trace: list  # LossBreakdown per step
    eval_trace: dict  # step -> (mean E_R, mean E_t)
    optimizer: AdamState
    seconds: float
    dropped_items: int = 0  # batch items whose gradient hit a near-degenerate spectrum
    skipped_steps: int = 0  # steps where every item was dropped

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "disp", "corr", "cons", "total", "eval_E_R", "eval_E_t"])
        for i, b in enumerate(self.trace):
            e = self.eval_trace.get(i + 1, ("", ""))
            w.writerow([i + 1, repr(b.disp), repr(b.corr), repr(b.cons), repr(b.total), *map(str, e)])
        return buf.getvalue()


def _lr(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / cfg.steps))
    return cfg.learning_rate


def training_goals(spec: TaskSpec, goal: str | None) -> tuple:
    """``None`` trains across all goals (goal-conditioned when there are several)."""
    if goal is None:
        return tuple(spec.goal_set)
    spec.goal_index(goal)
    return (goal,)


def make_demos(spec: TaskSpec, goals, n_demos: int, seed: int) -> list[DemoPair]:
    return [make_demo(spec, g, [seed, gi, k]) for gi, g in enumerate(goals) for k in range(n_demos)]


def held_out_samples(spec: TaskSpec, goals, n: int, seed: int, yaw_only=False, translation_scale=None):
    """Fresh demos (unseen surface samples) in fresh random poses."""
    scale = anchor_diameter(spec) if translation_scale is None else translation_scale
    rng = np.random.default_rng([seed, 7919])
    out = []
    for i in range(n):
        g = goals[i % len(goals)]
        demo = make_demo(spec, g, [seed, 104729, i])
        out.append(sample_training_pair(demo, scale, rng, yaw_only=yaw_only))
    return out


def _subsample(demo: DemoPair, n: int, rng) -> DemoPair:
    ia = rng.permutation(len(demo.cloud_a))[:n]
    ib = rng.permutation(len(demo.cloud_b))[:n]
    return replace(demo, cloud_a=demo.cloud_a[np.sort(ia)], cloud_b=demo.cloud_b[np.sort(ib)])


def _jitter(demo: DemoPair, std: float, rng) -> DemoPair:
    return replace(demo, cloud_a=demo.cloud_a + rng.normal(0.0, std, demo.cloud_a.shape),
                   cloud_b=demo.cloud_b + rng.normal(0.0, std, demo.cloud_b.shape))


def _item(s, gc: bool):
    return make_item(s.posed_a, s.posed_b, s.t_gt, s.goal_index if gc else None)


def _batch_gradient(params, model, batch, w: LossWeights):
    """Mean gradient over the items whose backward pass succeeds.

    The whole batch is differentiated at once; only when that fails are items
    differentiated one by one. Items hitting a near-degenerate singular spectrum are dropped (a fresh
    random pose is drawn for them on a later step).
    """
    names = list(params)
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    total, parts = batch_loss_torch(leaves, model, batch, w)
    try:
        grads = torch.autograd.grad(total, [leaves[k] for k in names], allow_unused=True)
        return {k: (torch.zeros_like(leaves[k]) if g is None else g) for k, g in zip(names, grads)}, parts
    except NearDegenerateSpectrum:
        pass
    acc = {k: torch.zeros_like(v) for k, v in params.items()}
    parts = []
    for item in batch:
        leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
        total, p = batch_loss_torch(leaves, model, [item], w)
        try:
            grads = torch.autograd.grad(total, [leaves[k] for k in names], allow_unused=True)
        except NearDegenerateSpectrum:
            continue
        for k, g in zip(names, grads):
            if g is not None:
                acc[k] += g
        parts.extend(p)
    if parts:
        acc = {k: g / len(parts) for k, g in acc.items()}
    return acc, parts


def train(cfg: TrainConfig, spec: TaskSpec, goal: str | None = None, init: TaxPoseModel | None = None,
          progress=None, demos: list[DemoPair] | None = None) -> TrainResult:
    """Train on ``cfg.n_demos`` demos per goal with random re-posing every step.

    ``demos`` overrides the generated demonstrations (e.g. a dataset read from
    disk); only those whose goal is being trained are used.
    """
    goals = training_goals(spec, goal)
    gc = spec.goal_conditioned and goal is None
    mcfg = cfg.model_config(len(spec.goal_set) if gc else 0)
    if init is not None:
        if init.config != mcfg:
            raise ValueError("initial model config does not match the training config")
        params = {k: v.detach().clone() for k, v in init.params.items()}
    else:
        params = init_params(mcfg, cfg.seed)
    if cfg.pretrained_encoder:
        from .formats import load_checkpoint

        pre = load_checkpoint(cfg.pretrained_encoder)
        for k, v in pre.params.items():
            if k.startswith("enc_") and k in params and params[k].shape == v.shape:
                params[k] = v.detach().clone()
    model = TaxPoseModel(mcfg, params)
    if demos is None:
        demos = make_demos(spec, goals, cfg.n_demos, cfg.seed)
    else:
        demos = [d for d in demos if d.goal in goals]
        if not demos:
            raise ValueError("no demonstrations for the requested goal(s)")
        if gc:
            demos = [replace(d, goal_index=spec.one_hot(d.goal)) for d in demos]
    scale = anchor_diameter(spec) if cfg.translation_scale is None else cfg.translation_scale
    rng = np.random.default_rng([cfg.seed, 1])
    held = held_out_samples(spec, goals, cfg.eval_samples, cfg.seed + 1000, cfg.yaw_only, scale) if cfg.eval_every else []
    state = AdamState.zeros(params)
    trace, eval_trace = [], {}
    dropped = skipped_steps = 0
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        batch = []
        for _ in range(cfg.batch_size):
            demo = demos[int(rng.integers(len(demos)))]
            if cfg.subsample:
                demo = _subsample(demo, cfg.subsample, rng)
            if cfg.jitter:
                demo = _jitter(demo, cfg.jitter, rng)
            batch.append(_item(sample_training_pair(demo, scale, rng, yaw_only=cfg.yaw_only), gc))
        if not all(bool(torch.isfinite(v).all()) for v in params.values()):
            # the loss cannot be finite once a parameter is not
            raise NonFiniteLoss(step, float("nan"))
        grads, parts = _batch_gradient(params, model, batch, cfg.loss_weights)
        if not parts:
            skipped_steps += 1
        else:
            value = float(np.mean([p.total for p in parts]))
            if not math.isfinite(value):
                raise NonFiniteLoss(step, value)
            with torch.no_grad():
                params, state = adam_step(params, grads, state, _lr(cfg, step),
                                          cfg.beta1, cfg.beta2, cfg.epsilon)
        dropped += cfg.batch_size - len(parts)
        model = TaxPoseModel(mcfg, params)
        nan = float("nan")
        trace.append(LossBreakdown(*(float(np.mean([getattr(p, f) for p in parts])) if parts else nan
                                     for f in ("disp", "corr", "cons", "total"))))
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
            rep = evaluate(model, held)
            eval_trace[step] = (rep.mean_rot_error, rep.mean_trans_error)
        if progress is not None:
            progress(step, trace[-1], eval_trace.get(step))
    return TrainResult(model, trace, eval_trace, state, time.perf_counter() - start, dropped, skipped_steps)


def evaluate_trained(model: TaxPoseModel, spec: TaskSpec, goal: str | None = None, n: int = 100,
                     seed: int = 0, yaw_only: bool = False, translation_scale=None) -> EvalReport:
    """Held-out evaluation with thresholds 5 degrees / 5% of the anchor diameter."""
    goals = training_goals(spec, goal)
    samples = held_out_samples(spec, goals, n, seed + 5000, yaw_only, translation_scale)
    gc = model.config.goal_context_dim > 0
    if not gc:
        samples = [replace(s, goal_index=None) for s in samples]
    return evaluate(model, samples, np.deg2rad(5.0), 0.05 * anchor_diameter(spec))


# --------------------------------------------------------------------------
# Ablations


def ablate_config(cfg: TrainConfig, which: str) -> TrainConfig:
    if which not in ABLATIONS:
        raise ValueError(f"unknown ablation {which!r}; expected one of {ABLATIONS}")
    w = cfg.loss_weights
    if which == "no_disp":
        return replace(cfg, loss_weights=replace(w, use_disp=False))
    if which == "no_corr":
        return replace(cfg, loss_weights=replace(w, lambda_corr=0.0))
    if which == "no_cons":
        return replace(cfg, loss_weights=replace(w, lambda_cons=0.0))
    if which == "scaled_combo":
        return replace(cfg, loss_weights=LossWeights(lambda_cons=1.1, lambda_corr=1.0, use_disp=False))
    if which == "no_residual":
        return replace(cfg, residuals_enabled=False)
    if which == "unweighted_svd":
        return replace(cfg, weighted_svd_enabled=False)
    if which in ("dot_product", "mlp_cross"):
        return replace(cfg, variant=which)
    if which == "dim_small":
        return replace(cfg, embed_dim=max(1, cfg.embed_dim // 4))
    return replace(cfg, pretrained_encoder=None)


def run_ablation(cfg: TrainConfig, spec: TaskSpec, which: str, goal: str | None = None,
                 seeds=(0,), eval_n: int = 100) -> dict:
    """Train base and ablated configs on shared seeds; report side by side."""
    ablated = ablate_config(cfg, which)
    report = {"ablation": which, "seeds": list(seeds), "base": [], "ablated": []}
    for s in seeds:
        for key, c in (("base", cfg), ("ablated", ablated)):
            res = train(replace(c, seed=s), spec, goal)
            rep = evaluate_trained(res.model, spec, goal, eval_n, s, c.yaw_only, c.translation_scale)
            report[key].append(rep.to_json())
    return report
