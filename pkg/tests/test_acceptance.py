"""Acceptance criteria A1-A11 at their stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary)
before asserting, so a failing criterion is still reported.
"""
import itertools
import time
from dataclasses import replace

import mpmath
import numpy as np
import pytest
import torch

from conftest import record
from taxpose.cli import main
from taxpose.errors import DegenerateCorrespondences
from taxpose.formats import read_checkpoint, read_dataset, save_checkpoint, write_dataset
from taxpose.geometry import (
    RigidTransform,
    apply,
    axis_angle,
    invert,
    random_rotation,
    random_transform,
    rot_z,
    rotation_angle_between,
    rotation_geodesic_error,
)
from taxpose.losses import LossWeights, batch_loss_torch, loss_gradient, make_item
from taxpose.model import (
    VARIANTS,
    ModelConfig,
    TaxPoseModel,
    attention_weights,
    dot_product_weights,
    forward,
    importance_weights,
)
from taxpose.pretrain import (
    PretrainConfig,
    feature_drift,
    geometric_weight_matrix,
    pretrain_encoder,
    weighted_infonce,
)
from taxpose.procrustes import CorrespondenceSet, solve_weighted
from taxpose.symmetry import (
    bottle_labels,
    bottle_normal,
    bowl_labels,
    bowl_normal,
    gripper_labels,
    labels_from_normal,
    pca,
)
from taxpose.tasks import (
    anchor_diameter,
    builtin_tasks,
    generate_shape,
    hull_corr_lower_bound,
    hull_violation,
    make_demo,
    sample_training_pair,
)
from taxpose.train import TrainConfig, evaluate_trained, train

# Training setup for A5/A6 (see the decisions ledger for why yaw-only).
A5_CONFIG = TrainConfig(steps=2000, n_demos=10, batch_size=8, learning_rate=3e-3, lr_schedule="cosine",
                        jitter=0.01, embed_dim=64, yaw_only=True)
A5_SEEDS = (0, 1, 2)


def noiseless_set(rng, t, na, nb, planar=False):
    pa, pb = rng.standard_normal((na, 3)), rng.standard_normal((nb, 3))
    if planar:
        pa[:, 2] = 0.0
        pb[:, 2] = 0.0
    wa, wb = rng.random(na) + 0.05, rng.random(nb) + 0.05
    return CorrespondenceSet(pa, apply(t, pa), pb, apply(invert(t), pb), wa, wb)


def brute_softmax(logits):
    mpmath.mp.dps = 50
    out = np.empty(np.shape(logits))
    for i, row in enumerate(np.atleast_2d(logits)):
        e = [mpmath.e ** mpmath.mpf(float(x)) for x in row]
        s = mpmath.fsum(e)
        out[i] = [float(x / s) for x in e]
    return out


# A1 --------------------------------------------------------------------------


def test_a1_procrustes_exactness():
    rng = np.random.default_rng(1)
    cases = []
    for _ in range(1000):
        t = random_transform(rng, translation_scale=2.0)
        cases.append((t, noiseless_set(rng, t, int(rng.integers(4, 40)), int(rng.integers(4, 40)))))
    start = time.perf_counter()
    sols = [solve_weighted(c).transform for _, c in cases]
    elapsed = time.perf_counter() - start
    ang = max(rotation_angle_between(s.rotation, t.rotation) for (t, _), s in zip(cases, sols))
    trans = max(np.linalg.norm(s.translation - t.translation) for (t, _), s in zip(cases, sols))
    ok = ang < 1e-9 and trans < 1e-9 and elapsed < 2.0
    record("A1", ok, f"max angle {ang:.2e} rad, max translation {trans:.2e}, {elapsed:.2f} s")
    assert ok


# A2 --------------------------------------------------------------------------


def test_a2_no_reflections():
    rng = np.random.default_rng(2)
    dets = []
    for i in range(10000):
        kind = i % 4
        if kind == 0:
            t = random_transform(rng)
            c = noiseless_set(rng, t, 10, 8)
        elif kind == 1:
            # planar clouds: the third singular value is zero
            t = random_transform(rng)
            c = noiseless_set(rng, t, 10, 8, planar=True)
        elif kind == 2:
            # anti-podal rotations (angle pi) with noise
            axis = rng.standard_normal(3)
            t = RigidTransform(axis_angle(axis, np.pi), rng.standard_normal(3))
            c = noiseless_set(rng, t, 12, 12)
            c = CorrespondenceSet(c.source_a, c.target_a + 0.05 * rng.standard_normal((12, 3)),
                                  c.source_b, c.target_b, c.weights_a, c.weights_b)
        else:
            # mirrored targets would be best fit by a reflection
            p = rng.standard_normal((9, 3))
            m = p @ np.diag([1.0, 1.0, -1.0]) @ random_rotation(rng).T
            c = CorrespondenceSet.uniform(p, m, m, p)
        dets.append(np.linalg.det(solve_weighted(c).transform.rotation))
    dets = np.array(dets)
    raised = 0
    degenerate = [
        np.outer(np.linspace(-1, 1, 7), [1.0, 2.0, -0.5]),
        np.ones((5, 3)),
        np.array([[0.3, -0.2, 1.0]]),
    ]
    for p in degenerate:
        try:
            solve_weighted(CorrespondenceSet.uniform(p, p + 1.0, p, p - 1.0))
        except DegenerateCorrespondences:
            raised += 1
    worst = float(np.abs(dets - 1).max())
    ok = worst < 1e-12 and raised == len(degenerate)
    record("A2", ok, f"10000 solves, max |det-1| {worst:.1e}, rank-deficient raised {raised}/{len(degenerate)}")
    assert ok


# A3 --------------------------------------------------------------------------


def test_a3_translational_equivariance():
    rng = np.random.default_rng(3)
    worst = 0.0
    for init in range(10):
        variant = VARIANTS[init % len(VARIANTS)]
        m = TaxPoseModel.initialize(ModelConfig(variant=variant), init, zero_heads=False)
        p_a, p_b = 0.3 * rng.standard_normal((24, 3)), 0.3 * rng.standard_normal((28, 3))
        base = forward(m, p_a, p_b).transform
        r, t = base.rotation, base.translation
        for _ in range(100):
            ta, tb = rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3)
            moved = forward(m, p_a + ta, p_b + tb).transform
            worst = max(worst, np.linalg.norm(moved.rotation - r),
                        np.linalg.norm(moved.translation - (t + tb - r @ ta)))
    ok = worst < 1e-9
    record("A3", ok, f"100 pairs x 10 inits, max deviation {worst:.2e}")
    assert ok


# A4 --------------------------------------------------------------------------


def _loss_noise(model, batch, w, h, directions=8, seed=0):
    """Rounding noise of the loss: largest residual of a quadratic fit along
    random parameter directions over [-h, h]."""
    pick = np.random.default_rng(seed)
    offsets = np.linspace(-h, h, 21)
    worst = 0.0
    for _ in range(directions):
        u = {k: torch.tensor(pick.standard_normal(tuple(v.shape))) for k, v in model.params.items()}
        norm = np.sqrt(sum(float((x**2).sum()) for x in u.values()))
        vals = []
        for s in offsets:
            params = {k: v + (s / norm) * u[k] for k, v in model.params.items()}
            with torch.no_grad():
                vals.append(float(batch_loss_torch(params, model, batch, w)[0]))
        fit = np.polyval(np.polyfit(offsets, vals, 2), offsets)
        worst = max(worst, float(np.abs(np.array(vals) - fit).max()))
    return worst


def _fd_max_rel(model, batch, w, h=1e-5, tol=1e-4, per_tensor=8, seed=0):
    """Max relative error over sampled entries. Gradients too small for the
    difference quotient to resolve at relative ``tol`` (given the measured loss
    noise) are compared on the absolute scale ``noise / h`` instead."""
    grads, _, _ = loss_gradient(model, batch, w)
    floor = max(1e-6, _loss_noise(model, batch, w, h) / (h * tol))
    pick = np.random.default_rng(seed)
    worst = 0.0
    for k, g in grads.items():
        flat = g.reshape(-1)
        for j in pick.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
            vals = []
            for sgn in (1, -1):
                params = {kk: v.clone() for kk, v in model.params.items()}
                params[k].view(-1)[j] += sgn * h
                with torch.no_grad():
                    vals.append(float(batch_loss_torch(params, model, batch, w)[0]))
            fd = (vals[0] - vals[1]) / (2 * h)
            a = float(flat[j])
            worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), floor))
    return worst


def test_a4_gradient_fidelity():
    rng = np.random.default_rng(4)
    worst = {}
    for variant, residual, weighted in itertools.product(VARIANTS, [True, False], [True, False]):
        cfg = ModelConfig(embed_dim=4, variant=variant, residuals_enabled=residual, weighted_svd_enabled=weighted)
        m = TaxPoseModel.initialize(cfg, 3, zero_heads=False)
        batch = [make_item(3 * rng.standard_normal((6, 3)), 3 * rng.standard_normal((6, 3)), random_transform(rng))]
        worst[(variant, residual, weighted)] = _fd_max_rel(m, batch, LossWeights())
    top = max(worst.values())
    ok = top < 1e-4
    record("A4", ok, f"{len(worst)} variant/flag combinations, max relative error {top:.2e}")
    assert ok


# A5 / A6 ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def peg_runs():
    """Full and residual-free models trained on the shared seeds."""
    spec = builtin_tasks()["peg-in-ring"]
    runs = {}
    for seed in A5_SEEDS:
        for key, cfg in (("full", A5_CONFIG), ("no_residual", replace(A5_CONFIG, residuals_enabled=False))):
            cfg = replace(cfg, seed=seed)
            res = train(cfg, spec)
            rep = evaluate_trained(res.model, spec, n=100, seed=seed, yaw_only=cfg.yaw_only)
            runs[key, seed] = (res, rep)
    return spec, runs


def test_a5_peg_in_ring_training(peg_runs):
    spec, runs = peg_runs
    d_max = 0.05 * anchor_diameter(spec)
    parts, passed, slowest = [], 0, 0.0
    for seed in A5_SEEDS:
        res, rep = runs["full", seed]
        good = rep.mean_rot_error < np.deg2rad(5.0) and rep.mean_trans_error < d_max
        passed += good
        slowest = max(slowest, res.seconds)
        parts.append(f"seed {seed}: E_R {np.rad2deg(rep.mean_rot_error):.2f} deg, E_t {rep.mean_trans_error:.4f}")
    ok = passed >= 2 and slowest < 600
    record("A5", ok, f"{passed}/3 seeds pass (E_t limit {d_max:.4f}, slowest {slowest:.0f} s); " + "; ".join(parts))
    assert ok


def test_a6_residual_necessity(peg_runs):
    spec, runs = peg_runs
    m = spec.hull_margin["in"]
    no_res = TaxPoseModel.initialize(ModelConfig(residuals_enabled=False), 0, zero_heads=False)
    invariant = True
    bounds = []
    for seed in range(10):
        s = sample_training_pair(make_demo(spec, "in", seed), anchor_diameter(spec), seed)
        target_a, target_b = apply(s.t_gt, s.posed_a), apply(invert(s.t_gt), s.posed_b)
        viol = hull_violation(target_a, s.posed_b)
        c = float(np.mean(viol >= m))
        bound = hull_corr_lower_bound(target_a, s.posed_b, target_b, s.posed_a)
        est = forward(no_res, s.posed_a, s.posed_b)
        inside = max(hull_violation(est.corrected_a, s.posed_b).max(),
                     hull_violation(est.corrected_b, s.posed_a).max()) <= 1e-12
        corr = float(np.mean(np.sum((est.corrected_a - target_a) ** 2, 1))
                     + np.mean(np.sum((est.corrected_b - target_b) ** 2, 1)))
        invariant &= inside and bound >= c * m**2 and corr >= bound and c > 0
        bounds.append((c, bound))
    # trained comparison on the shared seeds, reported only
    ranking = []
    for seed in A5_SEEDS:
        full, ablated = runs["full", seed][1].mean_trans_error, runs["no_residual", seed][1].mean_trans_error
        ranking.append(f"seed {seed}: full {full:.4f} vs no_residual {ablated:.4f}"
                       f" ({'ablated worse' if ablated > full else 'ablated NOT worse'})")
    c_min = min(c for c, _ in bounds)
    record("A6", invariant, f"hull invariant holds (c >= {c_min:.2f}, m = {m}); " + "; ".join(ranking))
    assert invariant


# A7 --------------------------------------------------------------------------


def test_a7_attention_weight_algebra():
    rng = np.random.default_rng(7)
    q, k = rng.standard_normal((9, 6)), rng.standard_normal((11, 6))
    att = attention_weights(q, k)
    err_att = np.abs(att - brute_softmax(q @ k.T / np.sqrt(6))).max()
    a, b = rng.standard_normal((9, 6)), rng.standard_normal((11, 6))
    dot = dot_product_weights(a, b)
    err_dot = np.abs(dot - brute_softmax(a @ b.T)).max()
    m = TaxPoseModel.initialize(ModelConfig(), 1, zero_heads=False)
    phi = rng.standard_normal((13, m.config.feat_dim))
    w = importance_weights(m, "a", phi)
    with torch.no_grad():
        h = torch.nn.functional.silu(torch.tensor(phi) @ m.params["wt_a.w0"] + m.params["wt_a.b0"])
        scores = (h @ m.params["wt_a.w1"] + m.params["wt_a.b1"]).numpy().reshape(1, -1)
    err_imp = np.abs(w - brute_softmax(scores)[0]).max()
    rows = max(np.abs(att.sum(1) - 1).max(), np.abs(dot.sum(1) - 1).max(), abs(w.sum() - 1))
    uniform = TaxPoseModel.initialize(ModelConfig(weighted_svd_enabled=False), 1, zero_heads=False)
    est = forward(uniform, rng.standard_normal((13, 3)), rng.standard_normal((17, 3)))
    exact = np.array_equal(est.weights_a, np.full(13, 1 / 13)) and np.array_equal(est.weights_b, np.full(17, 1 / 17))
    err = max(err_att, err_dot, err_imp)
    ok = rows < 1e-9 and err < 1e-12 and exact
    record("A7", ok, f"row sums within {rows:.1e}, oracle error {err:.1e}, uniform ablation exact: {exact}")
    assert ok


# A8 --------------------------------------------------------------------------


def test_a8_infonce_pretraining():
    mc = ModelConfig()
    shapes = [generate_shape({"kind": "l_peg"}, 64, 0)]
    from taxpose.model import init_params

    params = init_params(mc, 0)
    before = feature_drift(params, mc, shapes)
    new, _, _ = pretrain_encoder(PretrainConfig(shapes=shapes, seed=0, steps=500), params, mc)
    after = feature_drift(new, mc, shapes)
    rng = np.random.default_rng(8)
    phi, psi = rng.standard_normal((8, 5)), rng.standard_normal((8, 5))
    d = geometric_weight_matrix(0.2 * rng.standard_normal((8, 3)))
    mpmath.mp.dps = 40
    ref = mpmath.mpf(0)
    for i in range(8):
        den = mpmath.fsum(mpmath.e ** (mpmath.mpf(float(d[i, j])) * mpmath.mpf(float(phi[i] @ psi[j])))
                          for j in range(8))
        ref -= mpmath.mpf(float(phi[i] @ psi[i])) - mpmath.log(den)
    err = abs(weighted_infonce(phi, psi, d) - float(ref))
    ok = after <= 0.5 * before and err < 1e-10
    record("A8", ok, f"drift {before:.4f} -> {after:.4f} ({1 - after / before:.0%} reduction), InfoNCE error {err:.1e}")
    assert ok


# A9 --------------------------------------------------------------------------


def test_a9_metric_conformance():
    r = random_rotation(9)
    got = [rotation_geodesic_error(r, r), rotation_geodesic_error(rot_z(np.pi), np.eye(3)),
           rotation_geodesic_error(rot_z(np.pi / 2), np.eye(3))]
    want = [0.0, np.pi / 2, np.pi / 4]
    err = max(abs(g - w) for g, w in zip(got, want))
    ok = err < 1e-12
    record("A9", ok, f"(R,R), (Rz(pi),I), (Rz(pi/2),I) -> {got[0]:.3g}, {got[1]:.12f}, {got[2]:.12f}; error {err:.1e}")
    assert ok


# A10 -------------------------------------------------------------------------


def test_a10_symmetry_labels():
    rng = np.random.default_rng(10)
    in_range, mirror_err, pca_err, plane_err = True, 0.0, 0.0, 0.0
    for _ in range(50):
        p = rng.standard_normal((60, 3)) * np.array([3.0, 1.0, 0.3]) @ random_rotation(rng).T + rng.standard_normal(3)
        g = rng.standard_normal(3)
        for lab in (gripper_labels(p), bottle_labels(p, g), bowl_labels(p, g)):
            in_range &= bool(np.all(np.abs(lab) <= 1))
        s = rng.standard_normal(3)
        s /= np.linalg.norm(s)
        mirrored = p - 2 * ((p - p.mean(0)) @ s)[:, None] * s
        mirror_err = max(mirror_err, np.abs(labels_from_normal(p, s) + labels_from_normal(mirrored, s)).max())
        ax = pca(p)
        c = p - p.mean(0)
        vals, vecs = np.linalg.eigh(c.T @ c / len(p))
        for i, j in enumerate([2, 1, 0]):
            pca_err = max(pca_err, abs(ax.variances[i] - vals[j]),
                          min(np.abs(ax.axes[i] - vecs[:, j]).max(), np.abs(ax.axes[i] + vecs[:, j]).max()))
        a = ax.axes[0]
        n = np.cross(a, g)
        plane_err = max(plane_err, np.abs(bottle_normal(a, g) - n / np.linalg.norm(n)).max())
        gh = g / np.linalg.norm(g)
        w = gh - (gh @ a) * a
        plane_err = max(plane_err, np.abs(bowl_normal(a, g) - w / np.linalg.norm(w)).max())
    ok = in_range and mirror_err < 1e-12 and pca_err < 1e-10 and plane_err < 1e-12
    record("A10", ok, f"labels in [-1,1]: {in_range}, mirror {mirror_err:.1e}, PCA {pca_err:.1e}, planes {plane_err:.1e}")
    assert ok


# A11 -------------------------------------------------------------------------


def test_a11_persistence(tmp_path, capsys):
    rng = np.random.default_rng(11)
    exact = True
    for variant in VARIANTS:
        m = TaxPoseModel.initialize(ModelConfig(variant=variant, goal_context_dim=4), 2, zero_heads=False)
        save_checkpoint(tmp_path / f"{variant}.json", m, ["in", "on", "left", "right"])
        m2, _ = read_checkpoint(tmp_path / f"{variant}.json")
        p_a, p_b = rng.standard_normal((20, 3)), rng.standard_normal((22, 3))
        a, b = forward(m, p_a, p_b, [0, 0, 1, 0]), forward(m2, p_a, p_b, [0, 0, 1, 0])
        exact &= np.array_equal(a.transform.to_row(), b.transform.to_row())
        exact &= np.array_equal(a.corrected_a, b.corrected_a) and np.array_equal(a.weights_b, b.weights_b)
    spec = builtin_tasks()["block-box-gc"]
    demos = {g: [make_demo(spec, g, [0, i, k]) for k in range(2)] for i, g in enumerate(spec.goal_set)}
    write_dataset(tmp_path / "ds", spec, demos)
    _, demos2 = read_dataset(tmp_path / "ds")
    m = TaxPoseModel.initialize(ModelConfig(goal_context_dim=4), 3, zero_heads=False)
    for g in spec.goal_set:
        for d1, d2 in zip(demos[g], demos2[g]):
            a = forward(m, d1.cloud_a, d1.cloud_b, spec.one_hot(g))
            b = forward(m, d2.cloud_a, d2.cloud_b, spec.one_hot(g))
            exact &= np.array_equal(a.transform.to_row(), b.transform.to_row())
    assert main(["gen", "peg-in-ring", str(tmp_path / "peg"), "--demos", "1"]) == 0
    save_checkpoint(tmp_path / "m.json", TaxPoseModel.initialize(ModelConfig(), 1, zero_heads=False))
    capsys.readouterr()
    good = main(["equivariance", str(tmp_path / "m.json"), str(tmp_path / "peg"), "--trials", "20"])
    control = main(["equivariance", str(tmp_path / "m.json"), str(tmp_path / "peg"), "--trials", "5",
                    "--debug-no-center"])
    capsys.readouterr()
    ok = exact and good == 0 and control == 4
    record("A11", ok, f"round trips bit-exact: {exact}; audit exit {good}, negative control exit {control}")
    assert ok
