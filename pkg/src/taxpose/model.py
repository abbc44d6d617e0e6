"""Cross-pose network: encoders, cross-object attention, residuals, weights.

Parameters live in a flat ``dict[str, torch.Tensor]`` (float64) owned by a
:class:`TaxPoseModel`. The pipeline itself is a set of pure functions over
that dict so the same code serves inference, gradient checks and training.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .errors import GoalContextMismatch, LengthMismatch, NumericalError
from .geometry import RigidTransform, as_cloud
from .procrustes import weighted_procrustes

VARIANTS = ("attention", "dot_product", "mlp_cross")
ENCODER_HIDDEN = 64
KNN = 8
ENCODER_INPUTS = 9
INPUT_SCALE = 0.3  # typical coordinate magnitude of desk-scale clouds


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    goal_context_dim: int = 0
    variant: str = "attention"
    residuals_enabled: bool = True
    weighted_svd_enabled: bool = True
    symmetry_labels: bool = False
    encoder_hidden: int = ENCODER_HIDDEN
    cross_hidden: int = 64
    knn: int = KNN
    # Negative control for the equivariance audit; never set in real use.
    debug_no_center: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.embed_dim < 1 or self.goal_context_dim < 0:
            raise ValueError("embed_dim must be >= 1 and goal_context_dim >= 0")

    @property
    def feat_dim(self) -> int:
        """Width of the features seen by the cross-correspondence estimators."""
        return self.embed_dim + (1 if self.symmetry_labels else 0)


def _linear(gen, fan_in, fan_out, zero=False, gain=3.0):
    # weights uniform in +-sqrt(gain / fan_in): gain 3 keeps unit variance, 6 suits SiLU layers
    if zero:
        return torch.zeros(fan_in, fan_out, dtype=torch.float64), torch.zeros(fan_out, dtype=torch.float64)
    bound = math.sqrt(gain / fan_in)
    w = (torch.rand(fan_in, fan_out, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    b = (torch.rand(fan_out, generator=gen, dtype=torch.float64) * 2 - 1) / math.sqrt(fan_in)
    return w, b


def init_params(cfg: ModelConfig, seed: int = 0, zero_heads: bool = True) -> dict[str, torch.Tensor]:
    """Uniform(+-1/sqrt(fan_in)) init; residual and weight heads start at zero.

    ``zero_heads=False`` randomizes the heads too, which tests use to exercise
    non-trivial residuals and importance weights.
    """
    gen = torch.Generator().manual_seed(int(seed))
    d, f, h = cfg.embed_dim, cfg.feat_dim, cfg.encoder_hidden
    params = {}
    for side in ("a", "b"):
        dims = [ENCODER_INPUTS + cfg.goal_context_dim, h, h, d]
        for i in range(3):
            params[f"enc_{side}.w{i}"], params[f"enc_{side}.b{i}"] = _linear(gen, dims[i], dims[i + 1], gain=6.0 if i else 3.0 / INPUT_SCALE**2)
        if cfg.variant == "mlp_cross":
            dims = [2 * f, cfg.cross_hidden, cfg.cross_hidden, f]
            for i in range(3):
                params[f"cross_{side}.w{i}"], params[f"cross_{side}.b{i}"] = _linear(gen, dims[i], dims[i + 1], gain=6.0 if i else 3.0)
        else:
            for name in ("wq", "wk", "wv"):
                params[f"cross_{side}.{name}"] = _linear(gen, f, f)[0]
        for head, out in (("res", 3), ("wt", 1)):
            params[f"{head}_{side}.w0"], params[f"{head}_{side}.b0"] = _linear(gen, f, f, gain=6.0)
            params[f"{head}_{side}.w1"], params[f"{head}_{side}.b1"] = _linear(gen, f, out, zero=zero_heads)
    return params


class TaxPoseModel:
    """Configuration plus the named parameter tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, torch.Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig | None = None, seed: int = 0, zero_heads: bool = True):
        config = config or ModelConfig()
        return cls(config, init_params(config, seed, zero_heads))

    def copy(self) -> "TaxPoseModel":
        return TaxPoseModel(self.config, {k: v.detach().clone() for k, v in self.params.items()})

    def with_config(self, **changes) -> "TaxPoseModel":
        return TaxPoseModel(replace(self.config, **changes), self.params)

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d.pop("debug_no_center")
        return d


@dataclass(frozen=True, eq=False)
class CrossPoseEstimate:
    transform: RigidTransform
    virtual_a: np.ndarray
    virtual_b: np.ndarray
    residual_a: np.ndarray
    residual_b: np.ndarray
    corrected_a: np.ndarray
    corrected_b: np.ndarray
    weights_a: np.ndarray
    weights_b: np.ndarray
    attention_ab: np.ndarray
    attention_ba: np.ndarray


# --------------------------------------------------------------------------
# Building blocks (torch, float64)


def _act(x):
    return torch.nn.functional.silu(x)


def _mlp(params, prefix, x, layers):
    for i in range(layers):
        x = x @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"]
        if i < layers - 1:
            x = _act(x)
    return x


def softmax_rows(logits: torch.Tensor) -> torch.Tensor:
    """Row softmax with max-subtraction."""
    z = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def knn_offsets(centered: torch.Tensor, k: int) -> torch.Tensor:
    """Mean of each point's k nearest neighbours minus the point itself."""
    n = centered.shape[0]
    k = min(k, n - 1)
    if k <= 0:
        return torch.zeros_like(centered)
    diff = centered[:, None, :] - centered[None, :, :]
    dist = (diff * diff).sum(-1)
    dist = dist + torch.diag(torch.full((n,), float("inf"), dtype=dist.dtype))
    idx = torch.topk(dist, k, dim=1, largest=False).indices
    return centered[idx].mean(dim=1) - centered


def _invariants(centered, nbr):
    """Rotation-invariant per-point scalars: radius, neighbour-offset length, their dot."""
    return torch.stack([
        torch.linalg.norm(centered, dim=1),
        torch.linalg.norm(nbr, dim=1),
        (centered * nbr).sum(dim=1),
    ], dim=1)


def encode_torch(params, cfg: ModelConfig, side: str, cloud: torch.Tensor, goal=None) -> torch.Tensor:
    centered = cloud if cfg.debug_no_center else cloud - cloud.mean(dim=0)
    nbr = knn_offsets(centered, cfg.knn)
    feats = [centered, nbr, _invariants(centered, nbr)]
    if cfg.goal_context_dim:
        if goal is None:
            raise GoalContextMismatch(f"model expects a goal one-hot of length {cfg.goal_context_dim}")
        goal = (goal if isinstance(goal, torch.Tensor) else torch.tensor(np.array(goal, dtype=np.float64))).reshape(-1)
        if goal.shape[0] != cfg.goal_context_dim:
            raise GoalContextMismatch(
                f"goal one-hot has length {goal.shape[0]}, model expects {cfg.goal_context_dim}"
            )
        feats.append(goal.expand(cloud.shape[0], -1))
    elif goal is not None and len(goal) != 0:
        raise GoalContextMismatch("model has no goal context but a goal vector was given")
    return _normalize_rows(_mlp(params, f"enc_{side}", torch.cat(feats, dim=1), 3))


def _normalize_rows(x):
    # parameter-free layer normalization: each point's feature has zero mean, unit variance
    if x.shape[1] < 2:
        return x
    mu = x.mean(dim=1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=1, keepdim=True)
    return (x - mu) / torch.sqrt(var + 1e-12)


def attention_logits(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return (q @ k.T) / math.sqrt(q.shape[1])


def cross_module(params, cfg: ModelConfig, side: str, psi_self, psi_other):
    """Return ``(phi_self, attention_matrix_or_None)``."""
    pre = f"cross_{side}"
    if cfg.variant == "mlp_cross":
        ctx = psi_other.mean(dim=0).expand(psi_self.shape[0], -1)
        return psi_self + _mlp(params, pre, torch.cat([psi_self, ctx], dim=1), 3), None
    q = psi_self @ params[f"{pre}.wq"]
    k = psi_other @ params[f"{pre}.wk"]
    v = psi_other @ params[f"{pre}.wv"]
    w = softmax_rows(attention_logits(q, k))
    return psi_self + w @ v, w


def residual_head(params, side, phi):
    return _mlp(params, f"res_{side}", phi, 2)


def weight_head(params, side, phi):
    return softmax_rows(_mlp(params, f"wt_{side}", phi, 2).reshape(1, -1)).reshape(-1)


def _labels(lab, n):
    lab = torch.tensor(np.array(lab, dtype=np.float64)).reshape(-1)
    if lab.shape[0] != n:
        raise LengthMismatch(f"{lab.shape[0]} symmetry labels for {n} points")
    return lab[:, None]


def forward_torch(params, cfg: ModelConfig, p_a: torch.Tensor, p_b: torch.Tensor, goal=None,
                  labels_a=None, labels_b=None) -> dict[str, torch.Tensor]:
    """Full pipeline on tensors; every intermediate is returned."""
    psi_a = encode_torch(params, cfg, "a", p_a, goal)
    psi_b = encode_torch(params, cfg, "b", p_b, goal)
    if cfg.symmetry_labels:
        if labels_a is None or labels_b is None:
            raise LengthMismatch("model uses symmetry labels; both label vectors are required")
        psi_a = torch.cat([psi_a, _labels(labels_a, p_a.shape[0])], dim=1)
        psi_b = torch.cat([psi_b, _labels(labels_b, p_b.shape[0])], dim=1)

    phi_a, att_a = cross_module(params, cfg, "a", psi_a, psi_b)
    phi_b, att_b = cross_module(params, cfg, "b", psi_b, psi_a)
    if cfg.variant == "attention":
        w_ab, w_ba = att_a, att_b
    else:
        w_ab = softmax_rows(phi_a @ phi_b.T)
        w_ba = softmax_rows(phi_b @ phi_a.T)

    v_a = w_ab @ p_b
    v_b = w_ba @ p_a
    if cfg.residuals_enabled:
        d_a = residual_head(params, "a", phi_a)
        d_b = residual_head(params, "b", phi_b)
    else:
        d_a = torch.zeros_like(v_a)
        d_b = torch.zeros_like(v_b)
    vt_a = v_a + d_a
    vt_b = v_b + d_b
    if cfg.weighted_svd_enabled:
        al_a = weight_head(params, "a", phi_a)
        al_b = weight_head(params, "b", phi_b)
    else:
        al_a = torch.full((p_a.shape[0],), 1.0 / p_a.shape[0], dtype=torch.float64)
        al_b = torch.full((p_b.shape[0],), 1.0 / p_b.shape[0], dtype=torch.float64)
    r, t, _ = weighted_procrustes(p_a, vt_a, p_b, vt_b, al_a, al_b)
    out = dict(
        psi_a=psi_a, psi_b=psi_b, phi_a=phi_a, phi_b=phi_b, w_ab=w_ab, w_ba=w_ba,
        virtual_a=v_a, virtual_b=v_b, residual_a=d_a, residual_b=d_b,
        corrected_a=vt_a, corrected_b=vt_b, weights_a=al_a, weights_b=al_b,
        rotation=r, translation=t,
    )
    if _STRICT:
        for name, x in out.items():
            if not bool(torch.isfinite(x).all()):
                raise NumericalError(f"non-finite values in {name}")
    return out


_STRICT = False


def set_float_strict(on: bool) -> None:
    """When on, every forward pass fails on any non-finite intermediate."""
    global _STRICT
    _STRICT = bool(on)


def _t(x):
    return torch.from_numpy(np.array(as_cloud(x)))


def _np(x):
    a = x.detach().numpy().copy()
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# numpy-facing operations


def encode(model: TaxPoseModel, side: str, cloud, goal=None) -> np.ndarray:
    with torch.no_grad():
        return _np(encode_torch(model.params, model.config, side, _t(cloud), goal))


def attention_weights(queries, keys) -> np.ndarray:
    """``softmax(q_i . k_j / sqrt(d))`` per row; inputs are projected features."""
    q = torch.tensor(np.array(queries, dtype=np.float64))
    k = torch.tensor(np.array(keys, dtype=np.float64))
    if q.shape[1] != k.shape[1]:
        raise LengthMismatch("query and key widths differ")
    return _np(softmax_rows(attention_logits(q, k)))


def dot_product_weights(phi_self, phi_other) -> np.ndarray:
    """``softmax(phi_i . phi_j)`` per row, no scaling and no projections."""
    a = torch.tensor(np.array(phi_self, dtype=np.float64))
    b = torch.tensor(np.array(phi_other, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise LengthMismatch("embedding widths differ")
    return _np(softmax_rows(a @ b.T))


def virtual_points(weights, other_cloud) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    p = as_cloud(other_cloud)
    if w.shape[1] != p.shape[0]:
        raise LengthMismatch(f"weights have {w.shape[1]} columns for {p.shape[0]} points")
    out = w @ p
    out.setflags(write=False)
    return out


def residuals(model: TaxPoseModel, side: str, phi) -> np.ndarray:
    with torch.no_grad():
        return _np(residual_head(model.params, side, torch.tensor(np.array(phi, dtype=np.float64))))


def importance_weights(model: TaxPoseModel, side: str, phi) -> np.ndarray:
    with torch.no_grad():
        return _np(weight_head(model.params, side, torch.tensor(np.array(phi, dtype=np.float64))))


def forward(model: TaxPoseModel, p_a, p_b, goal=None, labels_a=None, labels_b=None) -> CrossPoseEstimate:
    with torch.no_grad():
        out = forward_torch(model.params, model.config, _t(p_a), _t(p_b), goal, labels_a, labels_b)
    return CrossPoseEstimate(
        transform=RigidTransform(out["rotation"].numpy(), out["translation"].numpy()),
        virtual_a=_np(out["virtual_a"]), virtual_b=_np(out["virtual_b"]),
        residual_a=_np(out["residual_a"]), residual_b=_np(out["residual_b"]),
        corrected_a=_np(out["corrected_a"]), corrected_b=_np(out["corrected_b"]),
        weights_a=_np(out["weights_a"]), weights_b=_np(out["weights_b"]),
        attention_ab=_np(out["w_ab"]), attention_ba=_np(out["w_ba"]),
    )
