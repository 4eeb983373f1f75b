"""Command-line entry point: ``dasp <command> [options]``.

Every command writes CSV reports plus ``<command>_summary.txt`` into
``--out`` and prints the summary. Exit status is 2 for configuration or
numerical errors and 3 when an output invariant is violated.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .agent import (TrainConfig, agent_state, config_from_mapping, load_config, policy_from_state,
                    pretrain_for, train, write_metrics)
from .density import DaspModel, write_loss_curve
from .envs import (KdeOracle, PointMassEnv, PushSpec, ExpertPolicy, generate_dataset, load_dataset,
                   save_dataset, verify_replay)
from .errors import DaspError
from .evaluation import (SWEEP_ALPHAS, compute_anchors, density_recovery_test, evaluate,
                         sweep_alpha, validity_analysis, write_recovery, write_sweep)
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger("dasp")


class InvariantViolation(DaspError):
    pass


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(args) -> TrainConfig:
    overrides = _parse_set(args.set)
    for key in ("alpha", "steps"):
        if getattr(args, key, None) is not None:
            overrides[key] = str(getattr(args, key))
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config:
        return load_config(args.config, overrides).validate()
    return config_from_mapping(overrides).validate()


def _fmt(x):
    return "" if x is None else repr(float(x))


def _summary(out: Path, name: str, lines):
    text = "\n".join(lines) + "\n"
    (out / f"{name}_summary.txt").write_text(text)
    sys.stdout.write(text)


def _load_dasp(path) -> DaspModel:
    return DaspModel.from_state_dict(load_checkpoint(path))


def _check_r_cap(cfg, metrics, max_r):
    if max_r > cfg.tau or any(row[3] > cfg.tau for row in metrics):
        raise InvariantViolation(f"density term exceeded its cap tau={cfg.tau}")


# --- commands -------------------------------------------------------------

def cmd_gen_data(args, cfg, out):
    env = PointMassEnv()
    ds = generate_dataset(env, args.tier, args.size, cfg.seed)
    bad = verify_replay(env, ds)
    path = out / "dataset.bin"
    save_dataset(path, ds)
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "source", "return"])
        for i, (src, ret) in enumerate(zip(ds.episode_sources, ds.episode_returns)):
            w.writerow([i, src, repr(ret)])
    _summary(out, "gen-data", [
        f"dataset {path}: tier={ds.tier} seed={ds.seed} transitions={len(ds)} episodes={len(ds.episode_returns)}",
        f"mean episode return {np.mean(ds.episode_returns):.3f}; goal terminals {int(ds.dones.sum())}",
        f"replay mismatches: {len(bad)}",
    ])
    if len(bad):
        raise InvariantViolation(f"{len(bad)} transitions fail replay verification")


def cmd_train_dasp(args, cfg, out):
    ds = load_dataset(args.data)
    model, curve = pretrain_for(ds, cfg)
    save_checkpoint(out / "dasp.ckpt", model.state_dict())
    write_loss_curve(out / "dasp_loss.csv", curve)
    last = curve[-1] if curve else None
    _summary(out, "train-dasp", [
        f"pretrained on {len(ds)} transitions for {cfg.dasp_epochs} epochs x {cfg.dasp_steps_per_epoch} steps",
        "final epoch: " + ("n/a" if last is None else
                           f"recon={last.recon:.4f} prior_kl={last.prior_kl:.4f} "
                           f"enc_kl={last.enc_kl:.4f} total={last.total:.4f}"),
    ])


def cmd_train(args, cfg, out):
    ds = load_dataset(args.data)
    dasp = _load_dasp(args.dasp) if args.dasp else None
    res = train(ds, cfg, dasp=dasp)
    save_checkpoint(out / "policy.ckpt", agent_state(res.policy, res.ensemble))
    save_checkpoint(out / "dasp.ckpt", res.dasp.state_dict())
    write_metrics(out / "metrics.csv", res.metrics)
    if res.dasp_curve:
        write_loss_curve(out / "dasp_loss.csv", res.dasp_curve)
    lines = [f"trained alpha={cfg.alpha} sigma={cfg.sigma} tau={cfg.tau} steps={cfg.steps} seed={cfg.seed}"]
    if res.metrics:
        _, c, q, r, clip = res.metrics[-1]
        lines.append(f"last window: critic_loss={c:.4f} q_term={q:.4f} r_term={r:.4f} clipped={clip:.3f}")
    _summary(out, "train", lines)
    _check_r_cap(cfg, res.metrics, res.max_r)


def _push(args):
    return None if args.push == "none" else PushSpec(args.push, period=args.push_period)


def cmd_eval(args, cfg, out):
    env = PointMassEnv()
    policy = policy_from_state(load_checkpoint(args.policy))
    oracle = KdeOracle.from_dataset(load_dataset(args.data)) if args.data else None
    rep = evaluate(policy, env, args.episodes, _push(args), cfg.seed, compute_anchors(env), oracle)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "return", "length", "pushes"])
        for i, e in enumerate(rep.episodes):
            w.writerow([i, repr(e.ret), len(e.rewards), len(e.push_steps)])
    with open(out / "eval_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["normalized_return", "raw_mean", "raw_std", "decrease_pct", "mean_log_density"])
        w.writerow([_fmt(rep.normalized_return), _fmt(rep.raw_mean), _fmt(rep.raw_std),
                    _fmt(rep.decrease_pct), _fmt(rep.mean_log_density)])
    acts = np.concatenate([e.actions for e in rep.episodes])
    _summary(out, "eval", [
        f"{args.episodes} episodes, push={args.push}",
        f"normalized return {rep.normalized_return:.2f} (raw {rep.raw_mean:.2f} +- {rep.raw_std:.2f})",
        f"decrease% {'null' if rep.decrease_pct is None else f'{rep.decrease_pct:.2f}'}",
    ])
    if np.any(acts < policy.low) or np.any(acts > policy.high):
        raise InvariantViolation("evaluation emitted an action outside the bounds")


def cmd_validity(args, cfg, out):
    env = PointMassEnv()
    ds = load_dataset(args.data)
    dasp = _load_dasp(args.dasp) if args.dasp else pretrain_for(ds, cfg)[0]
    rows = []
    for seed in range(cfg.seed, cfg.seed + args.seeds):
        for tdm in (False, True):
            rep = validity_analysis(dasp, ds, ExpertPolicy(env), args.n_states, seed, cfg.tau,
                                    cfg.n_samples, tdm, env,
                                    deterministic_prediction=cfg.deterministic_prediction)
            rows.append((seed, "true_dynamics" if tdm else "learned", rep))
    with open(out / "validity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "prediction", "safe_exp_score", "unsafe_exp_score", "margin", "tau"])
        for seed, kind, rep in rows:
            w.writerow([seed, kind, repr(rep.safe_mean), repr(rep.unsafe_mean), repr(rep.margin), repr(rep.tau)])
    learned = [r for _, k, r in rows if k == "learned"]
    _summary(out, "validity", [
        f"{args.seeds} seeds x {args.n_states} states, tau={cfg.tau}",
        f"learned model: safe {np.mean([r.safe_mean for r in learned]):.4f} "
        f"unsafe {np.mean([r.unsafe_mean for r in learned]):.4f} "
        f"margin>0 in {sum(r.margin > 0 for r in learned)}/{len(learned)} seeds",
    ])


def cmd_sweep(args, cfg, out):
    env = PointMassEnv()
    ds = load_dataset(args.data)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else list(SWEEP_ALPHAS)
    dasp = _load_dasp(args.dasp) if args.dasp else None
    cells = sweep_alpha(ds, alphas, cfg, env, compute_anchors(env), args.episodes, cfg.seed, dasp)
    write_sweep(out / "sweep.csv", cells)
    lines = [f"alpha sweep over {alphas}, steps={cfg.steps}"]
    for c in cells:
        val = "failed" if c.normalized_return is None else f"{c.normalized_return:.2f}"
        lines.append(f"  alpha={c.alpha:g}: {val}")
    _summary(out, "sweep-alpha", lines)


def cmd_recovery(args, cfg, out):
    env = PointMassEnv()
    ds = load_dataset(args.data)
    dasp = _load_dasp(args.dasp) if args.dasp else pretrain_for(ds, cfg)[0]
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    with_term, ablated = [], []
    for s in seeds:
        with_term.append(train(ds, cfg.replace(seed=s), dasp=dasp).policy)
        ablated.append(train(ds, cfg.replace(seed=s, alpha=0.0), dasp=dasp).policy)
    oracle = KdeOracle.from_dataset(ds)
    rep = density_recovery_test(with_term, ablated, env, oracle, _push(args), seeds, args.episodes,
                                args.window, compute_anchors(env))
    write_recovery(out / "recovery.csv", rep)
    with open(out / "recovery_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["steps_after_push", "dasp_log_density", "ablated_log_density"])
        for k, (d, a) in enumerate(zip(rep.dasp_curve, rep.ablated_curve), 1):
            w.writerow([k, repr(float(d)), repr(float(a))])
    _summary(out, "recovery", [
        f"alpha={cfg.alpha} vs alpha=0, push={args.push}, {len(seeds)} seeds",
        f"density-term agent ahead in {rep.wins}/{len(seeds)} seeds; mean gap {rep.gap:.4f}",
        f"decrease%: with term {rep.dasp_decrease}, ablated {rep.ablated_decrease}",
    ])


# --- parser ---------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file with TrainConfig fields")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dasp", description="Density-aware safety perception for offline RL")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="roll out a scripted policy into a dataset")
    g.add_argument("--tier", default="medium", help="random, medium, expert or mixture(r)")
    g.add_argument("--size", type=int, default=50000)
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("train-dasp", parents=[common], help="pretrain the density model")
    d.add_argument("--data", required=True)
    d.set_defaults(func=cmd_train_dasp)

    t = sub.add_parser("train", parents=[common], help="train the regularized actor-critic")
    t.add_argument("--data", required=True)
    t.add_argument("--dasp", help="pretrained density checkpoint (skips pretraining)")
    t.add_argument("--alpha", type=float)
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a policy checkpoint")
    e.add_argument("--policy", required=True)
    e.add_argument("--data", help="dataset for the KDE density column")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--push", default="none", choices=["none", "slight", "moderate", "large"])
    e.add_argument("--push-period", type=int, default=40)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("validity", parents=[common], help="behavior vs random action scores")
    v.add_argument("--data", required=True)
    v.add_argument("--dasp")
    v.add_argument("--n-states", type=int, default=3000)
    v.add_argument("--seeds", type=int, default=1)
    v.set_defaults(func=cmd_validity)

    s = sub.add_parser("sweep-alpha", parents=[common], help="train and evaluate one agent per alpha")
    s.add_argument("--data", required=True)
    s.add_argument("--dasp")
    s.add_argument("--alphas", help="comma-separated list (default: the standard seven values)")
    s.add_argument("--episodes", type=int, default=20)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("recovery", parents=[common], help="post-push density, alpha vs alpha=0")
    r.add_argument("--data", required=True)
    r.add_argument("--dasp")
    r.add_argument("--seeds", type=int, default=10)
    r.add_argument("--episodes", type=int, default=20)
    r.add_argument("--window", type=int, default=20)
    r.add_argument("--push", default="moderate", choices=["none", "slight", "moderate", "large"])
    r.add_argument("--push-period", type=int, default=40)
    r.add_argument("--alpha", type=float)
    r.add_argument("--steps", type=int)
    r.set_defaults(func=cmd_recovery)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = build_config(args)
        out.mkdir(parents=True, exist_ok=True)
        args.func(args, cfg, out)
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3
    except (DaspError, argparse.ArgumentTypeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
