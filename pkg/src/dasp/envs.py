"""Point-mass environment, scripted behavior policies, offline datasets,
push perturbations and a kernel-density oracle over dataset states."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DomainError
from .nn import Rng

STATE_DIM = 4
ACTION_DIM = 2


@dataclass(frozen=True)
class PointMassEnv:
    """2-D point mass: state (px, py, vx, vy), action = force in [-1, 1]^2.

    v <- clip(v + 0.1 a, -1, 1); p <- p + 0.1 v; walls at +-arena.
    Reward is minus the distance of the new position to the goal.
    """

    goal: tuple = (3.0, 3.0)
    start: tuple = (-3.0, -3.0)
    start_spread: float = 0.5
    arena: float = 5.0
    horizon: int = 200
    goal_radius: float = 0.1
    dt: float = 0.1
    max_speed: float = 1.0
    env_id: str = "pointmass"

    state_dim = STATE_DIM
    action_dim = ACTION_DIM
    action_low = (-1.0, -1.0)
    action_high = (1.0, 1.0)

    def reset(self, rng: Rng, n: int = 1):
        """Initial states: position uniform in a square around ``start``, at rest."""
        s = np.zeros((n, STATE_DIM))
        s[:, :2] = np.asarray(self.start) + rng.uniform(-self.start_spread, self.start_spread, (n, 2))
        return s

    def version_tag(self) -> str:
        return (f"{self.env_id}:goal={self.goal}:start={self.start}:spread={self.start_spread}"
                f":arena={self.arena}:H={self.horizon}:r={self.goal_radius}:dt={self.dt}")


def env_step(env: PointMassEnv, s, a, t=None):
    """Deterministic transition. ``t`` is the index of the step being taken;
    when given, ``done`` also flags the horizon. Out-of-range actions are clipped."""
    single = np.ndim(s) == 1
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.clip(np.atleast_2d(np.asarray(a, dtype=np.float64)), -1.0, 1.0)
    v = np.clip(s[:, 2:] + env.dt * a, -env.max_speed, env.max_speed)
    p = s[:, :2] + env.dt * v
    hit = np.abs(p) >= env.arena
    p = np.clip(p, -env.arena, env.arena)
    v = np.where(hit, 0.0, v)
    s_next = np.hstack([p, v])
    dx = p[:, 0] - env.goal[0]
    dy = p[:, 1] - env.goal[1]
    dist = np.sqrt(dx * dx + dy * dy)
    reward = -dist
    done = dist < env.goal_radius
    if t is not None:
        done = done | (np.asarray(t) + 1 >= env.horizon)
    if single:
        return s_next[0], float(reward[0]), bool(done[0])
    return s_next, reward, done


def reached_goal(env: PointMassEnv, s):
    s = np.atleast_2d(s)
    return np.hypot(s[:, 0] - env.goal[0], s[:, 1] - env.goal[1]) < env.goal_radius


# --- scripted policies ----------------------------------------------------

class RandomPolicy:
    def __call__(self, states, rng: Rng):
        return rng.uniform(-1.0, 1.0, (len(np.atleast_2d(states)), ACTION_DIM))


@dataclass
class ExpertPolicy:
    """Proportional-derivative controller toward the goal."""
    env: PointMassEnv
    kp: float = 1.0
    kd: float = 2.0

    def __call__(self, states, rng: Rng = None):
        s = np.atleast_2d(states)
        a = self.kp * (np.asarray(self.env.goal) - s[:, :2]) - self.kd * s[:, 2:]
        return np.clip(a, -1.0, 1.0)


@dataclass
class MediumPolicy:
    """Expert with Gaussian action noise and occasional uniform actions."""
    env: PointMassEnv
    noise_std: float = 0.5
    random_prob: float = 0.2

    def __call__(self, states, rng: Rng):
        s = np.atleast_2d(states)
        n = len(s)
        a = ExpertPolicy(self.env)(s) + self.noise_std * rng.normal((n, ACTION_DIM))
        a = np.clip(a, -1.0, 1.0)
        rand = rng.uniform(-1.0, 1.0, (n, ACTION_DIM))
        pick = rng.random(n) < self.random_prob
        return np.where(pick[:, None], rand, a)


# --- datasets -------------------------------------------------------------

@dataclass
class Dataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    tier: str
    seed: int
    env_id: str = "pointmass"
    episode_sources: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    @property
    def size(self):
        return len(self.states)

    def subset(self, idx):
        return Dataset(self.states[idx], self.actions[idx], self.rewards[idx],
                       self.next_states[idx], self.dones[idx], self.tier, self.seed, self.env_id)


_MIXTURE = re.compile(r"^mixture\(([0-9.eE+-]+)\)$")
TIERS = ("random", "medium", "expert")


def parse_tier(tier: str):
    """Return ``(name, random_ratio)``; ratio is only meaningful for mixtures."""
    if tier in TIERS:
        return tier, None
    m = _MIXTURE.match(tier)
    if m:
        r = float(m.group(1))
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"mixture ratio must lie in [0, 1], got {r}")
        return "mixture", r
    raise ConfigError(f"unknown dataset tier {tier!r}")


def _mixture_source(i, ratio):
    # evenly interleaved schedule: after k episodes, round-down(k * ratio) were random
    return "random" if np.floor((i + 1) * ratio + 1e-9) > np.floor(i * ratio + 1e-9) else "expert"


def rollout(env: PointMassEnv, policy, rng: Rng, s0=None):
    """One episode; returns per-step arrays and the return."""
    s = env.reset(rng)[0] if s0 is None else np.asarray(s0, float)
    S, A, R, S2, D = [], [], [], [], []
    for t in range(env.horizon):
        a = policy(s[None, :], rng)[0]
        s2, r, done = env_step(env, s, a, t)
        terminal = bool(reached_goal(env, s2)[0])
        S.append(s); A.append(np.clip(a, -1.0, 1.0)); R.append(r); S2.append(s2); D.append(terminal)
        s = s2
        if done:
            break
    return S, A, R, S2, D


def generate_dataset(env: PointMassEnv, tier: str, size: int, seed: int) -> Dataset:
    """Roll out the scripted policy of ``tier`` until ``size`` transitions are collected.

    ``dones`` marks true terminals (goal reached) only; horizon cut-offs end
    an episode without being stored as terminal.
    """
    if size < 1:
        raise ConfigError("dataset size must be >= 1")
    name, ratio = parse_tier(tier)
    rng = Rng(seed)
    policies = {"random": RandomPolicy(), "expert": ExpertPolicy(env), "medium": MediumPolicy(env)}
    cols = [[], [], [], [], []]
    sources, returns = [], []
    ep = 0
    while len(cols[0]) < size:
        src = _mixture_source(ep, ratio) if name == "mixture" else name
        episode = rollout(env, policies[src], rng.child(ep))
        for col, vals in zip(cols, episode):
            col.extend(vals)
        sources.append(src)
        returns.append(float(np.sum(episode[2])))
        ep += 1
    S, A, R, S2, D = (np.asarray(c[:size]) for c in cols)
    return Dataset(S.astype(float), A.astype(float), R.astype(float), S2.astype(float),
                   D.astype(float), tier, int(seed), env.env_id, sources, returns)


def save_dataset(path, ds: Dataset):
    header = (f"DASPDATA v1 {ds.env_id} {ds.states.shape[1]} {ds.actions.shape[1]} "
              f"{len(ds)} {ds.tier} {ds.seed}\n")
    body = np.hstack([ds.states, ds.actions, ds.rewards[:, None], ds.next_states, ds.dones[:, None]])
    Path(path).write_bytes(header.encode("ascii") + np.ascontiguousarray(body, "<f8").tobytes())


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    parts = data[:nl].decode("ascii").split()
    if len(parts) != 8 or parts[0] != "DASPDATA" or parts[1] != "v1":
        raise ValueError(f"{path}: not a DASPDATA v1 file")
    env_id, sd, ad, n, tier, seed = parts[2], int(parts[3]), int(parts[4]), int(parts[5]), parts[6], int(parts[7])
    width = 2 * sd + ad + 2
    body = np.frombuffer(data, dtype="<f8", offset=nl + 1).reshape(n, width).astype(float)
    return Dataset(body[:, :sd], body[:, sd:sd + ad], body[:, sd + ad],
                   body[:, sd + ad + 1:2 * sd + ad + 1], body[:, -1], tier, seed, env_id)


def verify_replay(env: PointMassEnv, ds: Dataset):
    """Indices of transitions whose stored outcome differs from re-simulation."""
    s2, r, _ = env_step(env, ds.states, ds.actions)
    bad = np.any(s2 != ds.next_states, axis=1) | (r != ds.rewards)
    return np.flatnonzero(bad)


# --- pushes ---------------------------------------------------------------

PUSH_MAGNITUDES = {"slight": 0.5, "moderate": 1.5, "large": 3.0}


@dataclass(frozen=True)
class PushSpec:
    level: str = "moderate"
    magnitude: float | None = None
    period: int = 40

    def __post_init__(self):
        if self.magnitude is None:
            if self.level not in PUSH_MAGNITUDES:
                raise ConfigError(f"unknown push level {self.level!r}")
            object.__setattr__(self, "magnitude", PUSH_MAGNITUDES[self.level])
        if self.period < 1:
            raise ConfigError("push period must be >= 1")


def apply_push(env: PointMassEnv, s, spec: PushSpec, rng: Rng):
    """Add a velocity impulse of norm ``spec.magnitude`` in a uniformly random direction."""
    single = np.ndim(s) == 1
    s = np.atleast_2d(np.asarray(s, dtype=np.float64)).copy()
    angle = rng.uniform(0.0, 2.0 * np.pi, len(s))
    s[:, 2] += spec.magnitude * np.cos(angle)
    s[:, 3] += spec.magnitude * np.sin(angle)
    return s[0] if single else s


# --- KDE oracle -----------------------------------------------------------

class KdeOracle:
    """Gaussian-kernel density over reference states.

    ``bandwidth`` may be a scalar (isotropic) or one value per dimension;
    by default Scott's factor ``n**(-1/(d+4))`` times each dimension's std.
    Reference rows are sorted so results do not depend on their order.
    """

    def __init__(self, reference, bandwidth=None):
        ref = np.asarray(reference, dtype=np.float64)
        if ref.ndim != 2 or len(ref) < 2:
            raise DomainError("KDE needs at least two reference states")
        ref = ref[np.lexsort(ref.T[::-1])]
        n, d = ref.shape
        if bandwidth is None:
            std = ref.std(axis=0)
            if np.any(std <= 0):
                raise DomainError("reference states have zero variance in some dimension")
            bandwidth = n ** (-1.0 / (d + 4)) * std
        h = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (d,)).copy()
        if np.any(h <= 0):
            raise DomainError("bandwidth must be positive")
        self.reference = ref
        self.bandwidth = h
        self._scaled = ref / h
        self._sq = np.sum(self._scaled**2, axis=1)
        self.log_norm = -np.log(n) - np.sum(np.log(h)) - 0.5 * d * np.log(2 * np.pi)

    @classmethod
    def from_dataset(cls, ds: Dataset, max_reference=5000, seed=0, bandwidth=None):
        states = ds.states
        if len(states) > max_reference:
            idx = np.sort(Rng(seed).choice(len(states), max_reference, replace=False))
            states = states[idx]
        return cls(states, bandwidth)

    def log_density(self, x):
        single = np.ndim(x) == 1
        q = np.atleast_2d(np.asarray(x, dtype=np.float64)) / self.bandwidth
        out = np.empty(len(q))
        chunk = max(1, 2_000_000 // len(self._scaled))
        for i in range(0, len(q), chunk):
            qi = q[i:i + chunk]
            d2 = np.sum(qi**2, axis=1)[:, None] + self._sq[None, :] - 2.0 * qi @ self._scaled.T
            out[i:i + chunk] = logsumexp(-0.5 * np.maximum(d2, 0.0), axis=1)
        out += self.log_norm
        return float(out[0]) if single else out


def kde_log_density(oracle: KdeOracle, s):
    return oracle.log_density(s)


PUSH_PERCENTILES = {"slight": 10.0, "moderate": 1.0, "large": 0.1}


@dataclass
class PushCalibration:
    level: str
    magnitude: float
    target_log_density: float
    pushed_median: float


def calibrate_push_magnitudes(env: PointMassEnv, dataset: Dataset, oracle: KdeOracle | None = None,
                              n_states=2000, seed=0, grid=None):
    """For each push level, the smallest magnitude on ``grid`` whose pushed
    dataset states have median KDE log-density below the level's percentile
    of the dataset states' own log-density."""
    oracle = oracle or KdeOracle.from_dataset(dataset)
    grid = np.round(np.arange(0.1, 5.01, 0.1), 10) if grid is None else np.asarray(grid, float)
    rng = Rng(seed)
    idx = rng.choice(len(dataset), min(n_states, len(dataset)), replace=False)
    s = dataset.states[idx]
    base = oracle.log_density(s)
    medians = []
    for mag in grid:
        pushed = apply_push(env, s, PushSpec(magnitude=float(mag)), rng.child(1))
        medians.append(float(np.median(oracle.log_density(pushed))))
    out = []
    for level, pct in PUSH_PERCENTILES.items():
        target = float(np.percentile(base, pct))
        hits = [i for i, m in enumerate(medians) if m < target]
        i = hits[0] if hits else len(grid) - 1
        out.append(PushCalibration(level, float(grid[i]), target, medians[i]))
    return out
