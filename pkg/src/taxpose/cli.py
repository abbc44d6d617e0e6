"""Command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical or solver
error, 4 audit failure. ``TAXPOSE_SEED`` supplies the default ``--seed``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, NumericalError, TaxPoseError, UnknownGoal
from .geometry import RigidTransform, apply, random_transform, rotation_geodesic_error, translation_error

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_AUDIT = 0, 2, 3, 4
EQUIVARIANCE_TOL = 1e-9


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("TAXPOSE_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"TAXPOSE_SEED must be an integer, got {raw!r}") from None


def _print_config(args, extra=None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",) and not k.startswith("_")}
    if extra:
        cfg.update(extra)
    print("config: " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


def load_spec(ref):
    """A built-in task name, a ``spec.json`` file, or a dataset directory."""
    from .tasks import TaskSpec, builtin_tasks

    tasks = builtin_tasks()
    if ref in tasks:
        return tasks[ref]
    p = Path(ref)
    if p.is_dir():
        p = p / "spec.json"
    if not p.is_file():
        raise UsageError(f"no built-in task or spec file named {ref!r} (built-ins: {', '.join(tasks)})")
    try:
        return TaskSpec.from_json(json.loads(p.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValueError) as exc:
        raise UsageError(f"invalid task spec {str(p)!r}: {exc}") from exc


def _goal_vector(goal, goal_set, model):
    dim = model.config.goal_context_dim
    if dim == 0:
        if goal is not None:
            raise UsageError("--goal given but the model is not goal-conditioned")
        return None
    if goal is None:
        raise UsageError("this model is goal-conditioned; pass --goal NAME (or index)")
    names = list(goal_set or [])
    if goal in names:
        idx = names.index(goal)
    elif goal.isdigit() and int(goal) < dim:
        idx = int(goal)
    else:
        raise UsageError(f"unknown goal {goal!r}; known goals: {names or list(range(dim))}")
    v = np.zeros(dim)
    v[idx] = 1.0
    return v


# --------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    from .formats import write_dataset
    from .tasks import make_demo

    spec = load_spec(args.spec)
    if args.demos < 1:
        raise UsageError("--demos must be >= 1")
    _print_config(args)
    demos = {g: [make_demo(spec, g, [args.seed, gi, k]) for k in range(args.demos)]
             for gi, g in enumerate(spec.goal_set)}
    write_dataset(args.out, spec, demos)
    print(f"wrote {args.demos} demos for each of {len(spec.goal_set)} goal(s) to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .formats import save_checkpoint, write_json
    from .model import ModelConfig, init_params, TaxPoseModel
    from .pretrain import PretrainConfig, feature_drift, pretrain_encoder
    from .tasks import generate_shape

    spec = load_spec(args.spec)
    _print_config(args)
    mcfg = ModelConfig(embed_dim=args.embed_dim)
    params = init_params(mcfg, args.seed)
    out = {}
    for side, desc, n in (("a", spec.action_shape, spec.n_points_a), ("b", spec.anchor_shape, spec.n_points_b)):
        shapes = [generate_shape(desc, n, [args.seed, 31, k]) for k in range(args.shapes)]
        cfg = PretrainConfig(shapes=shapes, steps=args.steps, lambda_geo=args.lambda_geo,
                             learning_rate=args.lr, seed=args.seed, side=side)
        before = feature_drift(params, mcfg, shapes, side)
        params, trace, _ = pretrain_encoder(cfg, params, mcfg)
        after = feature_drift(params, mcfg, shapes, side)
        out[side] = {"drift_before": before, "drift_after": after, "final_loss": trace[-1]}
        print(f"encoder {side}: rotational feature drift {before:.4g} -> {after:.4g}")
    save_checkpoint(args.out, TaxPoseModel(mcfg, params))
    if args.report:
        write_json(args.report, out)
    return EXIT_OK


def _train_config(args):
    from .losses import LossWeights
    from .train import TrainConfig

    return TrainConfig(
        steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
        lr_schedule=args.lr_schedule, jitter=args.jitter,
        embed_dim=args.embed_dim, variant=args.variant, residuals_enabled=not args.no_residual,
        weighted_svd_enabled=not args.unweighted_svd, pretrained_encoder=args.pretrained,
        n_demos=args.demos, yaw_only=args.yaw_only, eval_every=args.eval_every,
        loss_weights=LossWeights(args.lambda_cons, args.lambda_corr, not args.no_disp),
    )


def cmd_train(args) -> int:
    from .formats import atomic_write, read_dataset, save_checkpoint, write_json
    from .train import train

    spec = load_spec(args.spec)
    demos = None
    if Path(args.spec).is_dir():
        _, by_goal = read_dataset(args.spec)
        demos = [d for ds in by_goal.values() for d in ds]
    cfg = _train_config(args)
    if args.goal is not None and args.goal not in spec.goal_set:
        raise UsageError(f"unknown goal {args.goal!r}; known goals: {list(spec.goal_set)}")
    _print_config(args, {"train_config": cfg.to_json()})
    res = train(cfg, spec, args.goal, demos=demos)
    out = Path(args.out)
    gc = res.model.config.goal_context_dim > 0
    save_checkpoint(out / "model.json", res.model, spec.goal_set if gc else None)
    write_json(out / "train_config.json", cfg.to_json() | {"task": spec.name, "goal": args.goal})
    atomic_write(out / "trace.csv", res.trace_csv())
    last = res.trace[-1]
    print(f"trained {cfg.steps} steps in {res.seconds:.1f}s; final loss {last.total:.6g}; "
          f"dropped items {res.dropped_items}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .formats import read_checkpoint, write_json
    from .train import evaluate_trained

    model, _ = read_checkpoint(args.model)
    spec = load_spec(args.spec)
    _print_config(args)
    rep = evaluate_trained(model, spec, args.goal, args.n, args.seed, args.yaw_only)
    report = rep.to_json()
    print(json.dumps(report, indent=2, sort_keys=True))
    target = args.out or (Path(args.spec) / "eval_report.json" if Path(args.spec).is_dir() else None)
    if target:
        write_json(target, report)
    return EXIT_OK


def cmd_solve(args) -> int:
    from .formats import format_transform, parse_transform, read_checkpoint, read_cloud
    from .model import forward

    model, goal_set = read_checkpoint(args.model)
    p_a, lab_a = read_cloud(args.cloud_a)
    p_b, lab_b = read_cloud(args.cloud_b)
    goal = _goal_vector(args.goal, goal_set, model)
    _print_config(args)
    est = forward(model, p_a, p_b, goal, lab_a, lab_b)
    print(format_transform(est.transform))
    if args.gt:
        text = Path(args.gt).read_text(encoding="utf-8") if Path(args.gt).is_file() else args.gt
        gt = parse_transform(text.strip())
        er = rotation_geodesic_error(est.transform.rotation, gt.rotation)
        et = translation_error(est.transform.translation, gt.translation)
        print(f"E_R {er!r} E_t {et!r}")
    return EXIT_OK


def equivariance_audit(model, p_a, p_b, goal=None, trials=100, seed=0) -> float:
    """Max deviation from ``R' = R`` and ``t' = t + t_beta - R t_alpha`` over random translations."""
    from .model import forward

    base = forward(model, p_a, p_b, goal).transform
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        ta, tb = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        t2 = forward(model, p_a + ta, p_b + tb, goal).transform
        dr = np.linalg.norm(t2.rotation - base.rotation)
        dt = np.linalg.norm(t2.translation - (base.translation + tb - base.rotation @ ta))
        worst = max(worst, float(dr), float(dt))
    return worst


def cmd_equivariance(args) -> int:
    from .formats import read_checkpoint, read_dataset
    from .tasks import make_demo, sample_training_pair

    model, goal_set = read_checkpoint(args.model)
    if args.debug_no_center:
        model = model.with_config(debug_no_center=True)
    spec, by_goal = read_dataset(args.dataset)
    goal_name = args.goal or spec.goal_set[0]
    demos = by_goal.get(goal_name) or [make_demo(spec, goal_name, args.seed)]
    goal = spec.one_hot(goal_name) if model.config.goal_context_dim else None
    _print_config(args)
    s = sample_training_pair(demos[0], 1.0, args.seed)
    dev = equivariance_audit(model, s.posed_a, s.posed_b, goal, args.trials, args.seed)
    ok = dev < EQUIVARIANCE_TOL
    print(json.dumps({"trials": args.trials, "max_deviation": dev, "tolerance": EQUIVARIANCE_TOL,
                      "passed": ok}, sort_keys=True))
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_ablate(args) -> int:
    from .formats import write_json
    from .train import run_ablation

    spec = load_spec(args.spec)
    cfg = _train_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    _print_config(args, {"train_config": cfg.to_json()})
    report = run_ablation(cfg, spec, args.which, args.goal, seeds, args.n)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        write_json(args.out, report)
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def _add_train_flags(p):
    from .model import VARIANTS
    from .train import TrainConfig

    d = TrainConfig()
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default=d.lr_schedule)
    p.add_argument("--jitter", type=float, default=d.jitter, help="per-point noise std for augmentation")
    p.add_argument("--demos", type=int, default=d.n_demos)
    p.add_argument("--embed-dim", type=int, default=d.embed_dim)
    p.add_argument("--variant", choices=VARIANTS, default=d.variant)
    p.add_argument("--no-residual", action="store_true")
    p.add_argument("--unweighted-svd", action="store_true")
    p.add_argument("--no-disp", action="store_true")
    p.add_argument("--lambda-cons", type=float, default=d.loss_weights.lambda_cons)
    p.add_argument("--lambda-corr", type=float, default=d.loss_weights.lambda_corr)
    p.add_argument("--pretrained", default=None, help="checkpoint whose encoders initialize training")
    p.add_argument("--yaw-only", action="store_true", help="rotate training poses about z only")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--goal", default=None, help="train a single goal (default: all goals)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taxpose", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="random seed (default: $TAXPOSE_SEED or 0)")
    p.add_argument("--float-strict", action="store_true", help="fail on any non-finite intermediate")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a demonstration dataset")
    g.add_argument("spec", help="built-in task name or spec.json path")
    g.add_argument("out")
    g.add_argument("--demos", type=int, default=10)
    g.set_defaults(func=cmd_gen)

    g = sub.add_parser("pretrain", help="contrastive pretraining of both encoders")
    g.add_argument("spec")
    g.add_argument("out", help="checkpoint path")
    g.add_argument("--steps", type=int, default=500)
    g.add_argument("--shapes", type=int, default=1)
    g.add_argument("--lambda-geo", type=float, default=10.0)
    g.add_argument("--lr", type=float, default=2.0)
    g.add_argument("--embed-dim", type=int, default=32)
    g.add_argument("--report", default=None)
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("train", help="train a cross-pose model")
    g.add_argument("spec", help="built-in task, spec.json, or dataset directory")
    g.add_argument("out", help="output directory")
    _add_train_flags(g)
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="evaluate on held-out random poses")
    g.add_argument("model")
    g.add_argument("spec")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--goal", default=None)
    g.add_argument("--yaw-only", action="store_true")
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("solve", help="estimate the cross-pose for one pair of clouds")
    g.add_argument("model")
    g.add_argument("cloud_a")
    g.add_argument("cloud_b")
    g.add_argument("--goal", default=None)
    g.add_argument("--gt", default=None, help="ground-truth transform (file or 12-real string)")
    g.set_defaults(func=cmd_solve)

    g = sub.add_parser("equivariance", help="audit translational equivariance")
    g.add_argument("model")
    g.add_argument("dataset")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--goal", default=None)
    g.add_argument("--debug-no-center", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_equivariance)

    g = sub.add_parser("ablate", help="train base and ablated configs side by side")
    g.add_argument("spec")
    g.add_argument("which", choices=__import__("taxpose.train", fromlist=["ABLATIONS"]).ABLATIONS)
    g.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed)")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--out", default=None)
    _add_train_flags(g)
    g.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    from .model import set_float_strict

    try:
        if args.seed is None:
            args.seed = _default_seed()
        set_float_strict(args.float_strict)
        if args.float_strict:
            np.seterr(all="raise")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numerical error (FloatingPointError): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointFormatError, UnknownGoal, ValueError, OSError, TaxPoseError) as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        set_float_strict(False)
        np.seterr(all="warn")


if __name__ == "__main__":
    sys.exit(main())
