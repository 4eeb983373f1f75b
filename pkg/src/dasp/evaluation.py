"""Evaluation protocols: normalized return, push robustness, density-score
validity, alpha sweeps and post-push density recovery."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .agent import GaussianPolicy, TrainConfig, act, train
from .density import DaspModel, dasp_loss, density_score
from .envs import (ExpertPolicy, KdeOracle, PointMassEnv, PushSpec, RandomPolicy, apply_push,
                   env_step)
from .nn import Rng

log = logging.getLogger(__name__)

ANCHOR_SEED = 1_000_003
ANCHOR_EPISODES = 200


def as_controller(policy):
    """Wrap a trained policy as a deterministic ``(states, rng) -> actions`` callable."""
    if isinstance(policy, GaussianPolicy):
        return lambda s, rng: act(policy, s, deterministic=True)
    return policy


@dataclass
class Anchors:
    random: float
    expert: float
    env_tag: str
    digest: str = ""

    def __post_init__(self):
        if not self.digest:
            self.digest = self.compute_digest(self.env_tag)

    @staticmethod
    def compute_digest(env_tag):
        return hashlib.sha256(env_tag.encode("utf-8")).hexdigest()[:16]

    def valid_for(self, env: PointMassEnv) -> bool:
        return self.digest == self.compute_digest(env.version_tag())

    def normalize(self, raw):
        return 100.0 * (raw - self.random) / (self.expert - self.random)


@dataclass
class EpisodeRecord:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    push_steps: list
    density: np.ndarray | None = None

    @property
    def ret(self):
        return float(np.sum(self.rewards))


@dataclass
class EvalReport:
    normalized_return: float
    raw_mean: float
    raw_std: float
    decrease_pct: float | None
    mean_log_density: float | None
    episodes: list = field(default_factory=list)
    anchors: Anchors | None = None


def rollouts(env: PointMassEnv, policy, n_episodes, seed, push: PushSpec | None = None):
    """Run ``n_episodes`` in lockstep. Resets, pushes and policy noise use
    separate substreams so two policies evaluated with one seed meet the same
    start states and push directions."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    ctrl = as_controller(policy)
    rng = Rng(seed)
    reset_rng, push_rng, act_rng = rng.child(0), rng.child(1), rng.child(2)
    s = env.reset(reset_rng, n_episodes)
    active = np.ones(n_episodes, dtype=bool)
    S = [[] for _ in range(n_episodes)]
    A = [[] for _ in range(n_episodes)]
    R = [[] for _ in range(n_episodes)]
    pushes = [[] for _ in range(n_episodes)]
    for t in range(env.horizon):
        if push is not None and t > 0 and t % push.period == 0:
            pushed = apply_push(env, s, push, push_rng)
            s = np.where(active[:, None], pushed, s)
            for i in np.flatnonzero(active):
                pushes[i].append(len(S[i]))
        a = np.clip(ctrl(s, act_rng), -1.0, 1.0)
        s2, r, done = env_step(env, s, a, t)
        for i in np.flatnonzero(active):
            S[i].append(s[i]); A[i].append(a[i]); R[i].append(r[i])
        active &= ~done
        s = s2
        if not active.any():
            break
    return [EpisodeRecord(np.array(S[i]), np.array(A[i]), np.array(R[i]), pushes[i])
            for i in range(n_episodes)]


def compute_anchors(env: PointMassEnv, n_episodes=ANCHOR_EPISODES, seed=ANCHOR_SEED) -> Anchors:
    rand = np.mean([e.ret for e in rollouts(env, RandomPolicy(), n_episodes, seed)])
    expert = np.mean([e.ret for e in rollouts(env, ExpertPolicy(env), n_episodes, seed)])
    return Anchors(float(rand), float(expert), env.version_tag())


def evaluate(policy, env: PointMassEnv, n_episodes, push: PushSpec | None = None, seed=0,
             anchors: Anchors | None = None, oracle: KdeOracle | None = None) -> EvalReport:
    """Deterministic-action rollouts, optionally with periodic pushes.

    ``decrease_pct`` compares against an unpushed run with the same seed and
    is ``None`` whenever the unpushed normalized score is not positive.
    """
    anchors = anchors or compute_anchors(env)
    if not anchors.valid_for(env):
        raise ValueError("normalization anchors were computed for a different environment build")
    eps = rollouts(env, policy, n_episodes, seed, push)
    rets = np.array([e.ret for e in eps])
    score = anchors.normalize(rets.mean())
    if push is None:
        decrease = 0.0 if score > 0 else None
    else:
        base = evaluate(policy, env, n_episodes, None, seed, anchors, None).normalized_return
        decrease = 100.0 * (base - score) / base if base > 0 else None
    mean_density = None
    if oracle is not None:
        for e in eps:
            e.density = oracle.log_density(e.states)
        mean_density = float(np.mean(np.concatenate([e.density for e in eps])))
    return EvalReport(float(score), float(rets.mean()), float(rets.std()), decrease, mean_density,
                      eps, anchors)


# --- validity of the density score ---------------------------------------

@dataclass
class ValidityReport:
    safe_mean: float
    unsafe_mean: float
    margin: float
    tau: float
    use_true_dynamics: bool = False


def _exp_scores(dasp, s, a, tau, n_samples, rng, env=None, deterministic_prediction=False):
    if env is None:
        sc = density_score(dasp, s, a, tau, n_samples, rng,
                           deterministic_prediction=deterministic_prediction)
    else:
        # true simulator step in place of the learned next-state prediction
        s_next, _, _ = env_step(env, s, a)
        sc = np.zeros(len(s))
        for _ in range(n_samples):
            sc += np.minimum(-dasp_loss(dasp, s, a, s_next, rng).total, tau) / n_samples
    return np.exp(sc)


def validity_analysis(dasp: DaspModel, dataset, safe_policy, n_states, seed, tau=0.0,
                      n_samples=1, use_true_dynamics=False, env: PointMassEnv | None = None,
                      unsafe_policy=None, deterministic_prediction=False) -> ValidityReport:
    """Mean ``exp(score)`` for actions from ``safe_policy`` versus uniform
    random actions (or ``unsafe_policy``) on states drawn from the dataset."""
    if use_true_dynamics and env is None:
        raise ValueError("use_true_dynamics needs the environment")
    rng = Rng(seed)
    idx = rng.child(0).integers(0, len(dataset.states), size=n_states)
    s = dataset.states[idx]
    a_safe = np.clip(as_controller(safe_policy)(s, rng.child(1)), -1.0, 1.0)
    unsafe = unsafe_policy if unsafe_policy is not None else RandomPolicy()
    a_unsafe = np.clip(as_controller(unsafe)(s, rng.child(2)), -1.0, 1.0)
    step_env = env if use_true_dynamics else None
    # both sets share one scoring stream: identical inputs give identical scores
    safe = _exp_scores(dasp, s, a_safe, tau, n_samples, rng.child(3), step_env,
                       deterministic_prediction).mean()
    uns = _exp_scores(dasp, s, a_unsafe, tau, n_samples, rng.child(3), step_env,
                      deterministic_prediction).mean()
    return ValidityReport(float(safe), float(uns), float(safe - uns), tau, use_true_dynamics)


# --- alpha sweep ----------------------------------------------------------

SWEEP_ALPHAS = (0.01, 0.05, 0.1, 0.5, 3.0, 10.0, 100.0)


@dataclass
class SweepCell:
    alpha: float
    normalized_return: float | None
    raw_mean: float | None
    status: str = "ok"


def sweep_alpha(dataset, alphas, base: TrainConfig, env: PointMassEnv, anchors: Anchors | None = None,
                n_episodes=20, eval_seed=0, dasp: DaspModel | None = None):
    """Train and evaluate one agent per alpha with a shared seed. Failures are
    recorded in the cell rather than aborting the sweep."""
    if not len(alphas):
        raise ValueError("alpha list is empty")
    anchors = anchors or compute_anchors(env)
    cells = []
    for alpha in alphas:
        try:
            res = train(dataset, base.replace(alpha=float(alpha)), dasp=dasp)
            dasp = res.dasp
            rep = evaluate(res.policy, env, n_episodes, None, eval_seed, anchors)
            cells.append(SweepCell(float(alpha), rep.normalized_return, rep.raw_mean))
        except Exception as exc:  # noqa: BLE001 - one bad cell must not end the sweep
            log.warning("alpha=%s failed: %s", alpha, exc)
            cells.append(SweepCell(float(alpha), None, None, f"failed: {type(exc).__name__}: {exc}"))
    return cells


def write_sweep(path, cells):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "normalized_return", "raw_return", "status"])
        for c in cells:
            w.writerow([repr(c.alpha),
                        "" if c.normalized_return is None else repr(c.normalized_return),
                        "" if c.raw_mean is None else repr(c.raw_mean), c.status])


# --- density recovery after pushes ----------------------------------------

@dataclass
class RecoveryReport:
    seeds: list
    dasp_density: list  # per-seed mean post-push log-density
    ablated_density: list
    dasp_curve: np.ndarray  # mean log-density by steps-after-push
    ablated_curve: np.ndarray
    terminal_gap: float
    wins: int
    dasp_decrease: float | None = None
    ablated_decrease: float | None = None

    @property
    def gap(self):
        return float(np.mean(np.subtract(self.dasp_density, self.ablated_density)))


def post_push_density(episodes, oracle: KdeOracle, window=20):
    """Per-offset lists of log-density of states visited 1..window steps after each push."""
    per_offset = [[] for _ in range(window)]
    for e in episodes:
        if not e.push_steps:
            continue
        dens = oracle.log_density(e.states)
        for p in e.push_steps:
            for k in range(window):
                j = p + 1 + k
                if j < len(dens):
                    per_offset[k].append(dens[j])
    return per_offset


def _window_states(episodes, window, every):
    """Without pushes: states following each would-be push time, for the null case."""
    return [EpisodeRecord(e.states, e.actions, e.rewards,
                          [p for p in range(every, len(e.states), every)]) for e in episodes]


def density_recovery_test(policy_dasp, policy_ablated, env: PointMassEnv, oracle: KdeOracle,
                          push: PushSpec | None, seeds, n_episodes=20, window=20,
                          anchors: Anchors | None = None) -> RecoveryReport:
    """Compare post-push density of visited states between two policies.

    ``policy_dasp`` and ``policy_ablated`` may each be one policy or a list
    with one policy per seed. With ``push=None`` the same windows are taken
    at the unpushed rollout's would-be push times (null comparison).
    """
    seeds = list(seeds)
    per_seed = lambda p: list(p) if isinstance(p, (list, tuple)) else [p] * len(seeds)
    pd, pa = per_seed(policy_dasp), per_seed(policy_ablated)
    anchors = anchors or compute_anchors(env)
    period = push.period if push is not None else PushSpec().period
    d_means, a_means = [], []
    d_curve, a_curve = [[] for _ in range(window)], [[] for _ in range(window)]
    for seed, p1, p2 in zip(seeds, pd, pa):
        means = []
        for pol, curve in ((p1, d_curve), (p2, a_curve)):
            eps = rollouts(env, pol, n_episodes, seed, push)
            if push is None:
                eps = _window_states(eps, window, period)
            offsets = post_push_density(eps, oracle, window)
            for k in range(window):
                curve[k].extend(offsets[k])
            flat = np.concatenate([np.asarray(o) for o in offsets if o]) if any(offsets) else np.array([np.nan])
            means.append(float(np.mean(flat)))
        d_means.append(means[0])
        a_means.append(means[1])
    d_c = np.array([np.mean(c) if c else np.nan for c in d_curve])
    a_c = np.array([np.mean(c) if c else np.nan for c in a_curve])
    wins = int(np.sum(np.array(d_means) > np.array(a_means)))
    rep = RecoveryReport(seeds, d_means, a_means, d_c, a_c, float(d_c[-1] - a_c[-1]), wins)
    if push is not None:
        dec = [[evaluate(p, env, n_episodes, push, s, anchors).decrease_pct for s, p in zip(seeds, pol)]
               for pol in (pd, pa)]
        rep.dasp_decrease = _mean_or_none(dec[0])
        rep.ablated_decrease = _mean_or_none(dec[1])
    return rep


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if len(vals) == len(values) and vals else None


def write_recovery(path, rep: RecoveryReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "dasp_post_push_log_density", "ablated_post_push_log_density"])
        for s, d, a in zip(rep.seeds, rep.dasp_density, rep.ablated_density):
            w.writerow([s, repr(d), repr(a)])
