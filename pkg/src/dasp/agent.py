"""Offline actor-critic with the density-score actor regularizer.

Critic: ensemble of Q networks trained on the Bellman error against the
minimum over target copies. Actor: tanh-Gaussian policy maximizing
``min_m Q_m(s, a) + alpha * R(s_hat, a_hat)`` where ``s_hat`` is a dataset
state perturbed with Gaussian noise and ``R`` is the clipped density score.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .density import DaspConfig, DaspModel, density_score_grad, pretrain_dasp
from .errors import ConfigError, NumericFault
from .nn import AdamState, Mlp, Rng, adam_step, load_mlp_state, mlp_state

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass
class TrainConfig:
    alpha: float = 0.1
    sigma: float = 0.1
    tau: float = 0.0
    gamma: float = 0.99
    steps: int = 5000
    batch_size: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    ensemble_size: int = 2
    rho: float = 0.005
    hidden: int = 64
    seed: int = 0
    log_every: int = 100
    # density model
    latent_dim: int = 16
    dasp_hidden: int = 64
    dasp_epochs: int = 200
    dasp_steps_per_epoch: int = 50
    dasp_batch_size: int = 256
    dasp_lr: float = 1e-3
    n_samples: int = 1
    deterministic_prediction: bool = False
    # keeps the R term out of the actor gradient while still logging it
    use_dasp_term: bool = True

    def validate(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("rho must lie in (0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.ensemble_size < 1 or self.hidden < 1:
            raise ConfigError("steps >= 0, batch_size >= 1, ensemble_size >= 1, hidden >= 1 required")
        if self.n_samples < 1 or self.log_every < 1:
            raise ConfigError("n_samples and log_every must be >= 1")
        return self

    def dasp_config(self) -> DaspConfig:
        return DaspConfig(latent_dim=self.latent_dim, hidden=self.dasp_hidden,
                          batch_size=self.dasp_batch_size, epochs=self.dasp_epochs,
                          steps_per_epoch=self.dasp_steps_per_epoch, lr=self.dasp_lr,
                          tau=self.tau, n_samples=self.n_samples,
                          deterministic_prediction=self.deterministic_prediction)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    return float(value)


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        out[key] = value
    return out


def config_from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for key, value in values.items():
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates[key] = _coerce(value, kinds[key]) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return base.replace(**updates)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    with open(path) as fh:
        values = parse_config_text(fh.read())
    values.update(overrides or {})
    return config_from_mapping(values)


# --- policy ---------------------------------------------------------------

class GaussianPolicy:
    """State -> (mean, log_std) network; actions are tanh-squashed into bounds."""

    def __init__(self, net: Mlp, low, high, lr=3e-4):
        self.net = net
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        self.action_dim = net.output_dim // 2
        self.opt = AdamState.for_params(net.params(), lr=lr)

    @classmethod
    def create(cls, state_dim, action_dim, rng: Rng, hidden=64, low=-1.0, high=1.0, lr=3e-4):
        net = Mlp.create([state_dim, hidden, hidden, 2 * action_dim], rng)
        lo = np.broadcast_to(low, (action_dim,))
        hi = np.broadcast_to(high, (action_dim,))
        return cls(net, lo, hi, lr)

    @property
    def center(self):
        return 0.5 * (self.high + self.low)

    @property
    def half_range(self):
        return 0.5 * (self.high - self.low)

    def params(self):
        return self.net.params()

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.net.copy(), self.low, self.high, self.opt.lr)


def policy_forward(policy: GaussianPolicy, s, eps):
    """Reparameterized action ``center + half * tanh(mu + std * eps)``.
    ``eps = None`` gives the deterministic action."""
    s = np.atleast_2d(s)
    out, cache = policy.net.forward_cached(s)
    A = policy.action_dim
    mu, raw = out[:, :A], out[:, A:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    std = np.exp(log_std)
    e = np.zeros_like(mu) if eps is None else eps
    t = np.tanh(mu + std * e)
    a = policy.center + policy.half_range * t
    return a, (cache, t, std, e, inside)


def policy_backward(policy: GaussianPolicy, fcache, grad_a):
    cache, t, std, e, inside = fcache
    du = grad_a * policy.half_range * (1.0 - t * t)
    g_out = np.hstack([du, du * std * e * inside])
    return policy.net.backward_cached(cache, g_out)


def act(policy: GaussianPolicy, s, deterministic=True, rng: Rng | None = None):
    single = np.ndim(s) == 1
    s = np.atleast_2d(s)
    eps = None if deterministic else rng.normal((len(s), policy.action_dim))
    a, _ = policy_forward(policy, s, eps)
    a = np.clip(a, policy.low, policy.high)
    return a[0] if single else a


# --- critic ---------------------------------------------------------------

class QEnsemble:
    def __init__(self, members: list, rho=0.005, lr=3e-4):
        self.members = members
        self.targets = [m.copy() for m in members]
        self.rho = rho
        self.opts = [AdamState.for_params(m.params(), lr=lr) for m in members]

    @classmethod
    def create(cls, state_dim, action_dim, rng: Rng, size=2, hidden=64, rho=0.005, lr=3e-4):
        members = [Mlp.create([state_dim + action_dim, hidden, hidden, 1], rng) for _ in range(size)]
        return cls(members, rho, lr)

    @property
    def size(self):
        return len(self.members)

    def values(self, s, a, target=False):
        x = np.hstack([np.atleast_2d(s), np.atleast_2d(a)])
        nets = self.targets if target else self.members
        return np.stack([net.forward_cached(x)[0][:, 0] for net in nets])

    def soft_update(self):
        rho = self.rho
        for m, t in zip(self.members, self.targets):
            for pm, pt in zip(m.params(), t.params()):
                pt *= 1.0 - rho
                pt += rho * pm


def perturb_state(s, sigma, rng: Rng):
    """Sample from the Gaussian ball of radius ``sigma`` around ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    noise = rng.normal(s.shape)
    return s + sigma * noise


def bellman_target(ensemble: QEnsemble, policy: GaussianPolicy, r, s_next, done, gamma, rng: Rng):
    """``r + gamma * (1 - done) * min_m Q_target_m(s', a')`` with ``a' ~ pi(.|s')``."""
    s_next = np.atleast_2d(s_next)
    eps = rng.normal((len(s_next), policy.action_dim))
    a_next, _ = policy_forward(policy, s_next, eps)
    q_next = ensemble.values(s_next, a_next, target=True).min(axis=0)
    r = np.asarray(r, dtype=np.float64)
    done = np.asarray(done, dtype=np.float64)
    return r + gamma * (1.0 - done) * q_next


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.s)


def critic_update(ensemble: QEnsemble, policy: GaussianPolicy, batch: Batch, gamma, rng: Rng):
    """One Adam step per member on the mean squared Bellman error, then a
    soft target update. Returns the per-member loss before the step."""
    if len(batch) == 0:
        raise ConfigError("empty batch")
    y = bellman_target(ensemble, policy, batch.r, batch.s_next, batch.done, gamma, rng)
    x = np.hstack([batch.s, batch.a])
    n = len(batch)
    losses = np.empty(ensemble.size)
    for i, (net, opt) in enumerate(zip(ensemble.members, ensemble.opts)):
        q, cache = net.forward_cached(x)
        err = q[:, 0] - y
        losses[i] = np.mean(err**2)
        if not np.isfinite(losses[i]):
            raise NumericFault(f"non-finite Bellman error for Q member {i}")
        grads, _ = net.backward_cached(cache, (2.0 / n) * err[:, None])
        adam_step(opt, net.params(), grads, net.param_names(f"q{i}."))
    ensemble.soft_update()
    return losses


# --- actor ----------------------------------------------------------------

@dataclass
class ActorStats:
    q_term: float
    r_term: float
    r_clipped_fraction: float
    r_max: float


def _min_q_and_grad(ensemble: QEnsemble, s, a):
    """Per-sample ``min_m Q_m(s, a)`` and its gradient w.r.t. ``a``."""
    x = np.hstack([s, a])
    S = s.shape[1]
    outs = [net.forward_cached(x) for net in ensemble.members]
    q = np.stack([o[0][:, 0] for o in outs])
    pick = np.argmin(q, axis=0)
    grad_a = np.zeros_like(a)
    for i, (net, (_, cache)) in enumerate(zip(ensemble.members, outs)):
        sel = (pick == i).astype(float)[:, None]
        if not sel.any():
            continue
        _, gx = net.backward_cached(cache, sel, params=False)
        grad_a += gx[:, S:]
    return q[pick, np.arange(len(pick))], grad_a


def actor_objective_grad(policy, ensemble, dasp, s, s_hat, eps_q, config: TrainConfig, score_rng: Rng):
    """Objective ``mean min-Q(s, pi(s)) + alpha * mean R(s_hat, pi(s_hat))``
    with fixed policy noise, plus its gradient w.r.t. the policy parameters.

    Returns ``(objective, grads, q_vals, r_vals, r_raw)``.
    """
    n = len(s)
    a_q, cache_q = policy_forward(policy, s, eps_q[0])
    q_vals, dq_da = _min_q_and_grad(ensemble, s, a_q)
    grads, _ = policy_backward(policy, cache_q, dq_da / n)

    a_r, cache_r = policy_forward(policy, s_hat, eps_q[1])
    r_vals, (_, dr_da), r_raw = density_score_grad(
        dasp, s_hat, a_r, config.tau, config.n_samples, score_rng,
        deterministic_prediction=config.deterministic_prediction,
        upstream=np.full(n, config.alpha / n))
    if config.use_dasp_term:
        grads_r, _ = policy_backward(policy, cache_r, dr_da)
        grads = [g + gr for g, gr in zip(grads, grads_r)]
    objective = float(np.mean(q_vals) + config.alpha * np.mean(r_vals))
    return objective, grads, q_vals, r_vals, r_raw


def actor_update(policy: GaussianPolicy, ensemble: QEnsemble, dasp: DaspModel, batch,
                 config: TrainConfig, rng: Rng, aux_rng: Rng | None = None, s_hat=None) -> ActorStats:
    """One Adam ascent step on the regularized actor objective.

    Everything the density term needs (perturbation, its policy noise, the
    score's latent draws) comes from ``aux_rng``, so ``rng`` sees exactly the
    draws of an actor without the term.
    """
    s = batch.s if isinstance(batch, Batch) else np.atleast_2d(batch)
    n = len(s)
    if n == 0:
        raise ConfigError("empty batch")
    aux = rng if aux_rng is None else aux_rng
    if s_hat is None:
        s_hat = perturb_state(s, config.sigma, aux)
    eps = (rng.normal((n, policy.action_dim)), aux.normal((n, policy.action_dim)))
    _, grads, q_vals, r_vals, r_raw = actor_objective_grad(
        policy, ensemble, dasp, s, s_hat, eps, config, aux)
    if not np.all(np.isfinite(q_vals)):
        raise NumericFault("non-finite Q term in actor objective")
    if not np.all(np.isfinite(r_vals)):
        raise NumericFault("non-finite density (R) term in actor objective")
    adam_step(policy.opt, policy.params(), [-g for g in grads], policy.net.param_names("policy."))
    return ActorStats(float(np.mean(q_vals)), float(np.mean(r_vals)),
                      float(np.mean(r_raw >= config.tau)), float(np.max(r_vals)))


# --- training loop --------------------------------------------------------

METRIC_COLUMNS = ["step", "critic_loss_mean", "actor_q_term", "actor_r_term", "r_term_clipped_fraction"]


@dataclass
class TrainResult:
    policy: GaussianPolicy
    ensemble: QEnsemble
    dasp: DaspModel
    metrics: list = field(default_factory=list)
    dasp_curve: list = field(default_factory=list)
    max_r: float = -np.inf


def init_models(config: TrainConfig, state_dim, action_dim, low=-1.0, high=1.0):
    rng = Rng(config.seed)
    policy = GaussianPolicy.create(state_dim, action_dim, rng.child(1), config.hidden, low, high,
                                   config.actor_lr)
    ensemble = QEnsemble.create(state_dim, action_dim, rng.child(2), config.ensemble_size,
                                config.hidden, config.rho, config.critic_lr)
    dasp = DaspModel.create(state_dim, action_dim, rng.child(3), config.latent_dim, config.dasp_hidden)
    return policy, ensemble, dasp


def pretrain_for(dataset, config: TrainConfig):
    """Density model pretrained exactly as ``train`` would do it for ``config``."""
    _, _, dasp = init_models(config, dataset.states.shape[1], dataset.actions.shape[1])
    return pretrain_dasp(dasp, dataset, config.dasp_config(), Rng(config.seed).child(4))


def train(dataset, config: TrainConfig, dasp: DaspModel | None = None,
          low=-1.0, high=1.0) -> TrainResult:
    """Pretrain the density model (unless one is supplied), then alternate
    critic and actor updates for ``config.steps`` minibatches."""
    config.validate()
    if dataset is None or len(dataset.states) == 0:
        raise ConfigError("training needs a non-empty dataset")
    sd, ad = dataset.states.shape[1], dataset.actions.shape[1]
    policy, ensemble, fresh = init_models(config, sd, ad, low, high)
    curve = []
    if dasp is None:
        dasp, curve = pretrain_dasp(fresh, dataset, config.dasp_config(), Rng(config.seed).child(4))
    rng = Rng(config.seed).child(5)
    aux = Rng(config.seed).child(6)
    n = len(dataset.states)
    bs = min(config.batch_size, n)
    result = TrainResult(policy, ensemble, dasp, dasp_curve=curve)
    window = []
    for step in range(config.steps):
        idx = rng.integers(0, n, size=bs)
        batch = Batch(dataset.states[idx], dataset.actions[idx], dataset.rewards[idx],
                      dataset.next_states[idx], dataset.dones[idx])
        closs = critic_update(ensemble, policy, batch, config.gamma, rng)
        stats = actor_update(policy, ensemble, dasp, batch, config, rng, aux)
        result.max_r = max(result.max_r, stats.r_max)
        window.append((float(np.mean(closs)), stats.q_term, stats.r_term, stats.r_clipped_fraction))
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            m = np.mean(window, axis=0)
            result.metrics.append([step + 1, *(float(v) for v in m)])
            window = []
    return result


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def agent_state(policy: GaussianPolicy, ensemble: QEnsemble | None = None) -> dict:
    out = mlp_state(policy.net, "policy.")
    out["policy.low"] = policy.low
    out["policy.high"] = policy.high
    if ensemble is not None:
        for i, (m, t) in enumerate(zip(ensemble.members, ensemble.targets)):
            out.update(mlp_state(m, f"q{i}."))
            out.update(mlp_state(t, f"q_target{i}."))
    return out


def policy_from_state(arrays: dict) -> GaussianPolicy:
    layers = sorted({k.split(".")[1] for k in arrays if k.startswith("policy.layer")})
    sizes = [arrays[f"policy.{layers[0]}.weight"].shape[0]]
    sizes += [arrays[f"policy.{l}.weight"].shape[1] for l in layers]
    net = Mlp.zeros(sizes)
    load_mlp_state(net, arrays, "policy.")
    return GaussianPolicy(net, arrays["policy.low"], arrays["policy.high"])
