"""Variational one-step-forward density model.

Two Gaussian encoders, ``q_theta(z|s,a)`` and ``q_psi(z|s')``, and a Gaussian
decoder ``P_phi(s'|z)``. The training loss per transition is

    recon    = ||mu_phi(z) - s'||^2,   z = mu_theta + sigma_theta * eps
    prior_kl = KL(q_theta(.|s,a) || N(0, I))
    enc_kl   = KL(q_psi(.|s') || q_theta(.|s,a))

and the density score of a state-action pair is ``min(-loss, tau)`` evaluated
on the model's own prediction of the next state.

All gradients are analytic; see ``_loss_core``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, NumericFault, ShapeError
from .nn import AdamState, Mlp, Rng, adam_step, load_mlp_state, mlp_state

LOG_STD_MIN = float(np.log(1e-4))
LOG_STD_MAX = float(np.log(1e4))


@dataclass
class DiagGaussian:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ShapeError(f"mean {self.mean.shape} and std {self.std.shape} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, rng: Rng):
        return self.mean + self.std * rng.normal(self.mean.shape)

    def log_prob(self, x):
        x = np.asarray(x, dtype=np.float64)
        zs = (x - self.mean) / self.std
        return np.sum(-0.5 * zs**2 - np.log(self.std) - 0.5 * np.log(2 * np.pi), axis=-1)


def standard_normal(dim: int) -> DiagGaussian:
    return DiagGaussian(np.zeros(dim), np.ones(dim))


def kl_diag_gaussian(p: DiagGaussian, q: DiagGaussian):
    """Closed-form KL(p || q) for diagonal Gaussians, summed over the last axis."""
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ShapeError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if np.any(p.std <= 0) or np.any(q.std <= 0):
        raise DomainError("standard deviations must be strictly positive")
    var_p, var_q = p.std**2, q.std**2
    terms = (np.log(q.std) - np.log(p.std)
             + (var_p + (p.mean - q.mean) ** 2) / (2.0 * var_q) - 0.5)
    return np.sum(terms, axis=-1)


@dataclass
class DaspLossBreakdown:
    recon: float
    prior_kl: float
    enc_kl: float
    total: float

    def as_row(self):
        return [self.recon, self.prior_kl, self.enc_kl, self.total]


@dataclass
class DaspConfig:
    latent_dim: int = 16
    hidden: int = 64
    batch_size: int = 256
    epochs: int = 200
    steps_per_epoch: int = 50
    lr: float = 1e-3
    normalize_states: bool = True
    tau: float = 0.0
    n_samples: int = 1
    deterministic_prediction: bool = False
    decoder_noise: bool = False


class DaspModel:
    """Parameters of the two encoders and the decoder.

    ``state_mean``/``state_std`` standardize states before they enter the
    networks; the loss is measured in standardized units.
    """

    def __init__(self, encoder_sa: Mlp, encoder_sp: Mlp, decoder: Mlp,
                 state_dim: int, action_dim: int, latent_dim: int,
                 state_mean=None, state_std=None):
        if encoder_sa.input_dim != state_dim + action_dim:
            raise ShapeError("encoder_sa input width must be state_dim + action_dim")
        if encoder_sp.input_dim != state_dim or decoder.input_dim != latent_dim:
            raise ShapeError("encoder_sp/decoder input widths do not match dims")
        if encoder_sa.output_dim != 2 * latent_dim or encoder_sp.output_dim != 2 * latent_dim:
            raise ShapeError("encoders must emit 2 * latent_dim outputs")
        if decoder.output_dim != 2 * state_dim:
            raise ShapeError("decoder must emit 2 * state_dim outputs")
        self.encoder_sa = encoder_sa
        self.encoder_sp = encoder_sp
        self.decoder = decoder
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.latent_dim = latent_dim
        self.state_mean = np.zeros(state_dim) if state_mean is None else np.asarray(state_mean, float)
        self.state_std = np.ones(state_dim) if state_std is None else np.asarray(state_std, float)

    @classmethod
    def create(cls, state_dim, action_dim, rng: Rng, latent_dim=16, hidden=64):
        h = [hidden, hidden]
        return cls(
            Mlp.create([state_dim + action_dim, *h, 2 * latent_dim], rng),
            Mlp.create([state_dim, *h, 2 * latent_dim], rng),
            Mlp.create([latent_dim, *h, 2 * state_dim], rng),
            state_dim, action_dim, latent_dim)

    @classmethod
    def zeros(cls, state_dim, action_dim, latent_dim=16, hidden=64):
        h = [hidden, hidden]
        return cls(
            Mlp.zeros([state_dim + action_dim, *h, 2 * latent_dim]),
            Mlp.zeros([state_dim, *h, 2 * latent_dim]),
            Mlp.zeros([latent_dim, *h, 2 * state_dim]),
            state_dim, action_dim, latent_dim)

    def nets(self):
        return {"encoder_sa": self.encoder_sa, "encoder_sp": self.encoder_sp, "decoder": self.decoder}

    def params(self):
        return [p for net in self.nets().values() for p in net.params()]

    def param_names(self):
        return [n for key, net in self.nets().items() for n in net.param_names(key + ".")]

    def copy(self) -> "DaspModel":
        return DaspModel(self.encoder_sa.copy(), self.encoder_sp.copy(), self.decoder.copy(),
                         self.state_dim, self.action_dim, self.latent_dim,
                         self.state_mean.copy(), self.state_std.copy())

    def state_dict(self) -> dict:
        out = {}
        for key, net in self.nets().items():
            out.update(mlp_state(net, key + "."))
        out["state_mean"] = self.state_mean
        out["state_std"] = self.state_std
        out["dims"] = np.array([self.state_dim, self.action_dim, self.latent_dim,
                                self.encoder_sa.sizes[1]], dtype=float)
        return out

    @classmethod
    def from_state_dict(cls, arrays: dict) -> "DaspModel":
        sd, ad, k, hidden = (int(v) for v in arrays["dims"])
        model = cls.zeros(sd, ad, k, hidden)
        for key, net in model.nets().items():
            load_mlp_state(net, arrays, key + ".")
        model.state_mean = arrays["state_mean"].copy()
        model.state_std = arrays["state_std"].copy()
        return model

    def check_finite(self):
        for name, p in zip(self.param_names(), self.params()):
            if not np.all(np.isfinite(p)):
                raise NumericFault(f"non-finite parameters in {name}")

    def _norm(self, s):
        return (s - self.state_mean) / self.state_std


def _split_head(out, dim):
    mean = out[:, :dim]
    raw = out[:, dim:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    return mean, log_std, inside


def _batch(x, width, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what}: expected width {width}, got shape {x.shape}")
    return x


def _squeeze(dist: DiagGaussian, single: bool) -> DiagGaussian:
    return DiagGaussian(dist.mean[0], dist.std[0]) if single else dist


def encode_sa(model: DaspModel, s, a) -> DiagGaussian:
    """q_theta(z | s, a)."""
    single = np.ndim(s) == 1
    s = _batch(s, model.state_dim, "state")
    a = _batch(a, model.action_dim, "action")
    if len(s) != len(a):
        raise ShapeError("state and action batches differ in length")
    out, _ = model.encoder_sa.forward_cached(np.hstack([model._norm(s), a]))
    mean, log_std, _ = _split_head(out, model.latent_dim)
    return _squeeze(DiagGaussian(mean, np.exp(log_std)), single)


def encode_sp(model: DaspModel, s_next) -> DiagGaussian:
    """q_psi(z | s')."""
    single = np.ndim(s_next) == 1
    s_next = _batch(s_next, model.state_dim, "next state")
    out, _ = model.encoder_sp.forward_cached(model._norm(s_next))
    mean, log_std, _ = _split_head(out, model.latent_dim)
    return _squeeze(DiagGaussian(mean, np.exp(log_std)), single)


def decode(model: DaspModel, z) -> DiagGaussian:
    """P_phi(s' | z), mapped back to raw state units."""
    single = np.ndim(z) == 1
    z = _batch(z, model.latent_dim, "latent")
    out, _ = model.decoder.forward_cached(z)
    mean, log_std, _ = _split_head(out, model.state_dim)
    dist = DiagGaussian(model.state_mean + model.state_std * mean, model.state_std * np.exp(log_std))
    return _squeeze(dist, single)


@dataclass
class _LossResult:
    recon: np.ndarray
    prior_kl: np.ndarray
    enc_kl: np.ndarray
    param_grads: list | None = None
    grad_s: np.ndarray | None = None
    grad_a: np.ndarray | None = None
    grad_s_next: np.ndarray | None = None

    @property
    def total(self):
        return self.recon + self.prior_kl + self.enc_kl


def _loss_core(model: DaspModel, s, a, s_next, eps, upstream=None, grads=True, param_grads=True):
    """Per-sample loss terms and, if ``grads``, gradients of
    ``sum_n upstream[n] * total[n]`` w.r.t. every input and, unless
    ``param_grads`` is false, every parameter."""
    S, K = model.state_dim, model.latent_dim
    sn = model._norm(s)
    spn = model._norm(s_next)

    out_sa, c_sa = model.encoder_sa.forward_cached(np.hstack([sn, a]))
    mu_t, ls_t, in_t = _split_head(out_sa, K)
    sig_t = np.exp(ls_t)
    out_sp, c_sp = model.encoder_sp.forward_cached(spn)
    mu_p, ls_p, in_p = _split_head(out_sp, K)
    sig_p = np.exp(ls_p)

    z = mu_t + sig_t * eps
    out_d, c_d = model.decoder.forward_cached(z)
    diff = out_d[:, :S] - spn

    var_t = sig_t**2
    var_p = sig_p**2
    dmu = mu_p - mu_t
    recon = np.sum(diff**2, axis=1)
    prior_kl = 0.5 * np.sum(var_t + mu_t**2 - 1.0 - 2.0 * ls_t, axis=1)
    enc_kl = np.sum(ls_t - ls_p + (var_p + dmu**2) / (2.0 * var_t) - 0.5, axis=1)
    res = _LossResult(recon, prior_kl, enc_kl)
    if not grads:
        return res

    n = len(s)
    w = np.full((n, 1), 1.0 / n) if upstream is None else np.asarray(upstream, float).reshape(n, 1)
    d_mu_f = 2.0 * diff * w
    dec_grads, dz = model.decoder.backward_cached(c_d, np.hstack([d_mu_f, np.zeros((n, S))]),
                                                  param_grads)

    d_mu_t = dz + (mu_t - dmu / var_t) * w
    d_ls_t = dz * eps * sig_t + (var_t - 1.0) * w + (1.0 - (var_p + dmu**2) / var_t) * w
    d_mu_p = dmu / var_t * w
    d_ls_p = (var_p / var_t - 1.0) * w
    sa_grads, dx_sa = model.encoder_sa.backward_cached(c_sa, np.hstack([d_mu_t, d_ls_t * in_t]),
                                                       param_grads)
    sp_grads, dx_sp = model.encoder_sp.backward_cached(c_sp, np.hstack([d_mu_p, d_ls_p * in_p]),
                                                       param_grads)

    res.param_grads = sa_grads + sp_grads + dec_grads
    res.grad_s = dx_sa[:, :S] / model.state_std
    res.grad_a = dx_sa[:, S:]
    res.grad_s_next = (dx_sp - d_mu_f) / model.state_std
    return res


def _check_terms(res: _LossResult):
    for name in ("recon", "prior_kl", "enc_kl"):
        if not np.all(np.isfinite(getattr(res, name))):
            raise NumericFault(f"non-finite {name} term in DASP loss")


def _inputs(model, s, a, s_next):
    s = _batch(s, model.state_dim, "state")
    a = _batch(a, model.action_dim, "action")
    s_next = _batch(s_next, model.state_dim, "next state")
    if not len(s) == len(a) == len(s_next):
        raise ShapeError("batch lengths differ")
    return s, a, s_next


def dasp_loss(model: DaspModel, s, a, s_next, rng: Rng) -> DaspLossBreakdown:
    """Loss terms for one transition (or per-sample arrays for a batch)."""
    single = np.ndim(s) == 1
    s, a, s_next = _inputs(model, s, a, s_next)
    eps = rng.normal((len(s), model.latent_dim))
    res = _loss_core(model, s, a, s_next, eps, grads=False)
    _check_terms(res)
    if single:
        recon, prior, enc = float(res.recon[0]), float(res.prior_kl[0]), float(res.enc_kl[0])
        return DaspLossBreakdown(recon, prior, enc, recon + prior + enc)
    return DaspLossBreakdown(res.recon, res.prior_kl, res.enc_kl, res.total)


def variational_objective(model: DaspModel, s, a, s_next, rng: Rng):
    """Per-sample lower bound on log d(s') in raw state units.

    The squared-error reconstruction is the negative log-likelihood of a
    Gaussian decoder with variance 1/2 up to its normalizer, so the bound is
    -total minus that normalizer and the log-Jacobian of the standardization.
    """
    bd = dasp_loss(model, s, a, s_next, rng)
    const = 0.5 * model.state_dim * np.log(np.pi) + np.sum(np.log(model.state_std))
    return -np.asarray(bd.total) - const


def dasp_loss_grads(model: DaspModel, s, a, s_next, eps):
    """Mean loss over a batch with fixed latent noise ``eps`` and its gradients.

    Returns ``(breakdown_of_means, param_grads, (grad_s, grad_a, grad_s_next))``.
    """
    s, a, s_next = _inputs(model, s, a, s_next)
    eps = np.asarray(eps, dtype=np.float64).reshape(len(s), model.latent_dim)
    res = _loss_core(model, s, a, s_next, eps)
    _check_terms(res)
    means = [float(np.mean(x)) for x in (res.recon, res.prior_kl, res.enc_kl)]
    bd = DaspLossBreakdown(*means, total=float(np.mean(res.total)))
    return bd, res.param_grads, (res.grad_s, res.grad_a, res.grad_s_next)


def pretrain_dasp(model: DaspModel, dataset, config: DaspConfig, rng: Rng):
    """Minimize the mean DASP loss with Adam over random minibatches.

    ``dataset`` needs ``states``, ``actions`` and ``next_states`` arrays.
    Returns the trained model (updated in place) and the per-epoch mean
    loss breakdown.
    """
    n = 0 if dataset is None else len(dataset.states)
    if n == 0:
        raise ConfigError("cannot pretrain the density model on an empty dataset")
    if config.batch_size < 1 or config.epochs < 0 or config.steps_per_epoch < 1:
        raise ConfigError("batch_size, steps_per_epoch must be >= 1 and epochs >= 0")
    S, A, N = dataset.states, dataset.actions, dataset.next_states
    if config.normalize_states:
        both = np.vstack([S, N])
        model.state_mean = both.mean(axis=0)
        model.state_std = np.maximum(both.std(axis=0), 1e-6)

    params, names = model.params(), model.param_names()
    opt = AdamState.for_params(params, lr=config.lr)
    batch = min(config.batch_size, n)
    curve = []
    for _ in range(config.epochs):
        acc = np.zeros(4)
        for _ in range(config.steps_per_epoch):
            idx = rng.integers(0, n, size=batch)
            eps = rng.normal((batch, model.latent_dim))
            bd, grads, _ = dasp_loss_grads(model, S[idx], A[idx], N[idx], eps)
            adam_step(opt, params, grads, names)
            acc += bd.as_row()
        acc /= config.steps_per_epoch
        curve.append(DaspLossBreakdown(*acc))
    model.check_finite()
    return model, curve


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "recon", "prior_kl", "enc_kl", "total"])
        for i, bd in enumerate(curve):
            w.writerow([i] + [repr(float(v)) for v in bd.as_row()])


def predict_next(model: DaspModel, s, a, rng: Rng, deterministic=False, decoder_noise=False):
    """Sample ``s'`` from the approximate dynamics ``q_theta`` + decoder.

    Returns ``(s_next, decoder_distribution)``; both in raw state units.
    With ``deterministic`` the latent is the encoder mean and ``s_next`` is the
    decoder mean. ``decoder_noise`` additionally samples from the decoder
    Gaussian, whose scale is not shaped by the training loss.
    """
    return _predict(model, s, a, rng, deterministic, decoder_noise)[:2]


def _predict(model, s, a, rng, deterministic, decoder_noise):
    single = np.ndim(s) == 1
    s = _batch(s, model.state_dim, "state")
    a = _batch(a, model.action_dim, "action")
    S, K = model.state_dim, model.latent_dim
    out_sa, c_sa = model.encoder_sa.forward_cached(np.hstack([model._norm(s), a]))
    mu_t, ls_t, in_t = _split_head(out_sa, K)
    sig_t = np.exp(ls_t)
    eps_z = np.zeros_like(mu_t) if deterministic else rng.normal(mu_t.shape)
    z = mu_t + sig_t * eps_z
    out_d, c_d = model.decoder.forward_cached(z)
    mu_f, ls_f, in_f = _split_head(out_d, S)
    sig_f = np.exp(ls_f)
    eps_x = rng.normal(mu_f.shape) if (decoder_noise and not deterministic) else np.zeros_like(mu_f)
    s_next = model.state_mean + model.state_std * (mu_f + sig_f * eps_x)
    dist = DiagGaussian(model.state_mean + model.state_std * mu_f, model.state_std * sig_f)
    cache = (c_sa, in_t, sig_t, eps_z, c_d, in_f, sig_f, eps_x)
    if single:
        return s_next[0], _squeeze(dist, True), cache
    return s_next, dist, cache


def _predict_backward(model, cache, grad_s_next):
    """Push d/ds' of the predicted state back to (s, a)."""
    c_sa, in_t, sig_t, eps_z, c_d, in_f, sig_f, eps_x = cache
    S = model.state_dim
    g = grad_s_next * model.state_std
    _, dz = model.decoder.backward_cached(c_d, np.hstack([g, g * sig_f * eps_x * in_f]), False)
    _, dx = model.encoder_sa.backward_cached(c_sa, np.hstack([dz, dz * sig_t * eps_z * in_t]), False)
    return dx[:, :S] / model.state_std, dx[:, S:]


def clip_score(x, tau):
    """f_tau(x) = min(x, tau)."""
    return np.minimum(x, tau)


def density_score(model: DaspModel, s_hat, a, tau=0.0, n_samples=1, rng: Rng = None,
                  deterministic_prediction=False, decoder_noise=False):
    """Clipped one-step-forward density score, averaged over ``n_samples``
    predicted next states. Higher means the predicted outcome lies in a
    denser region of the training data; never exceeds ``tau``."""
    single = np.ndim(s_hat) == 1
    score, _, _ = density_score_grad(model, s_hat, a, tau, n_samples, rng,
                                     deterministic_prediction, decoder_noise, grads=False)
    return float(score[0]) if single else score


def density_score_grad(model: DaspModel, s_hat, a, tau=0.0, n_samples=1, rng: Rng = None,
                       deterministic_prediction=False, decoder_noise=False,
                       upstream=None, grads=True):
    """Per-sample scores plus gradients of ``sum_n upstream[n] * score[n]``
    with respect to ``s_hat`` and ``a`` (through both the predicted next state
    and the loss evaluation). Also returns the per-sample raw, unclipped value
    averaged over samples, for logging."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    model.check_finite()
    s = _batch(s_hat, model.state_dim, "state")
    a = _batch(a, model.action_dim, "action")
    n = len(s)
    w = np.ones(n) if upstream is None else np.asarray(upstream, float).reshape(n)
    score = np.zeros(n)
    raw_mean = np.zeros(n)
    gs = np.zeros_like(s)
    ga = np.zeros_like(a)
    for _ in range(n_samples):
        s_next, _, cache = _predict(model, s, a, rng, deterministic_prediction, decoder_noise)
        eps = rng.normal((n, model.latent_dim))
        # input gradients are per-row, so one pass with unit weights suffices
        res = _loss_core(model, s, a, s_next, eps, upstream=np.ones(n), grads=grads, param_grads=False)
        _check_terms(res)
        raw = -res.total
        score += clip_score(raw, tau) / n_samples
        raw_mean += raw / n_samples
        if grads:
            # d score / d total = -1 below the cap, 0 above
            f = (-(raw < tau).astype(float) * w / n_samples)[:, None]
            ps, pa = _predict_backward(model, cache, f * res.grad_s_next)
            gs += f * res.grad_s + ps
            ga += f * res.grad_a + pa
    return score, (gs, ga), raw_mean
