import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from dasp.density import (DaspConfig, DaspModel, DiagGaussian, clip_score, dasp_loss,
                          dasp_loss_grads, decode, density_score, encode_sa, encode_sp,
                          kl_diag_gaussian, predict_next, pretrain_dasp, variational_objective,
                          write_loss_curve)
from dasp.envs import ExpertPolicy, RandomPolicy
from dasp.errors import ConfigError, DomainError, NumericFault, ShapeError
from dasp.nn import Layer, Mlp, Rng

from conftest import fd_grad, rel_err


def mc_kl(p_mean, p_std, q_mean, q_std, n, seed):
    """Monte-Carlo E_p[log p - log q] for diagonal Gaussians."""
    rng = np.random.default_rng(seed)
    x = p_mean + p_std * rng.standard_normal((n, len(p_mean)))
    return float(np.mean(np.sum(norm.logpdf(x, p_mean, p_std) - norm.logpdf(x, q_mean, q_std), axis=1)))


def single_layer(weight, bias):
    return Mlp([Layer(np.asarray(weight, float), np.asarray(bias, float), "identity")])


def tiny_model():
    """state_dim = action_dim = latent_dim = 1, every net a single linear layer."""
    enc_sa = single_layer([[0.5, -0.2], [1.0, 0.3]], [0.1, -0.4])   # (s, a) -> (mu, log_std)
    enc_sp = single_layer([[2.0, -0.5]], [-1.0, 0.2])               # s' -> (mu, log_std)
    dec = single_layer([[1.5, 0.25]], [0.5, -0.1])                  # z -> (mu, log_std)
    return DaspModel(enc_sa, enc_sp, dec, 1, 1, 1)


def linear_gaussian(n, seed, scale=1.0, A=0.8, B=0.5, noise=0.3):
    """s' = A s + B a + eps with s, a ~ N(0, scale^2); s' ~ N(0, var) exactly."""
    rng = np.random.default_rng(seed)
    s = scale * rng.standard_normal((n, 1))
    a = scale * rng.standard_normal((n, 1))
    s_next = A * s + B * a + scale * noise * rng.standard_normal((n, 1))

    class D:
        pass

    d = D()
    d.states, d.actions, d.next_states = s, a, s_next
    d.var = scale**2 * (A**2 + B**2 + noise**2)
    return d


class TestKL:
    def test_identical_is_zero(self):
        p = DiagGaussian(np.zeros(3), np.ones(3))
        assert kl_diag_gaussian(p, p) == 0.0

    def test_mean_shift(self):
        assert kl_diag_gaussian(DiagGaussian([1.0], [1.0]), DiagGaussian([0.0], [1.0])) == pytest.approx(0.5)

    def test_scale_closed_form(self):
        # log(1/2) + 4/2 - 1/2
        closed = kl_diag_gaussian(DiagGaussian([0.0], [2.0]), DiagGaussian([0.0], [1.0]))
        assert closed == pytest.approx(np.log(0.5) + 1.5, abs=1e-14)

    def test_against_monte_carlo(self):
        rng = np.random.default_rng(2)
        for k in range(20):
            pm, qm = rng.normal(0, 1, 2), rng.normal(0, 1, 2)
            ps, qs = np.exp(rng.normal(0, 0.3, 2)), np.exp(rng.normal(0, 0.3, 2))
            closed = kl_diag_gaussian(DiagGaussian(pm, ps), DiagGaussian(qm, qs))
            assert abs(closed - mc_kl(pm, ps, qm, qs, 10**6, k)) <= 5e-3

    def test_rejects_non_positive_std(self):
        with pytest.raises(DomainError):
            kl_diag_gaussian(DiagGaussian([0.0], [0.0]), DiagGaussian([0.0], [1.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            kl_diag_gaussian(DiagGaussian(np.zeros(2), np.ones(2)), DiagGaussian(np.zeros(3), np.ones(3)))

    def test_non_negative_on_many_pairs(self):
        rng = np.random.default_rng(1)
        shape = (10**4, 4)
        p = DiagGaussian(rng.normal(0, 2, shape), np.exp(rng.normal(0, 1, shape)))
        q = DiagGaussian(rng.normal(0, 2, shape), np.exp(rng.normal(0, 1, shape)))
        assert np.all(kl_diag_gaussian(p, q) >= 0)
        assert np.all(kl_diag_gaussian(p, p) == 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-3, 3), st.floats(-5, 5), st.floats(-3, 3)),
                min_size=1, max_size=5))
def test_kl_non_negative_property(rows):
    r = np.array(rows)
    p = DiagGaussian(r[:, 0], np.exp(r[:, 1]))
    q = DiagGaussian(r[:, 2], np.exp(r[:, 3]))
    assert kl_diag_gaussian(p, q) >= -1e-12


class TestEncodeDecode:
    def test_zero_model_is_standard_normal(self):
        m = DaspModel.zeros(4, 2, latent_dim=3, hidden=5)
        for dist in (encode_sa(m, np.ones(4), np.ones(2)), encode_sp(m, np.ones(4))):
            np.testing.assert_array_equal(dist.mean, np.zeros(3))
            np.testing.assert_array_equal(dist.std, np.ones(3))
        out = decode(m, np.ones(3))
        np.testing.assert_array_equal(out.mean, np.zeros(4))
        np.testing.assert_array_equal(out.std, np.ones(4))

    def test_purity(self):
        m = DaspModel.create(4, 2, Rng(0), 3, 8)
        s, a = np.arange(4.0), np.array([0.2, -0.1])
        for f in (lambda: encode_sa(m, s, a), lambda: encode_sp(m, s), lambda: decode(m, s[:3])):
            d1, d2 = f(), f()
            assert np.array_equal(d1.mean, d2.mean) and np.array_equal(d1.std, d2.std)

    def test_hand_evaluated_tiny_model(self):
        m = tiny_model()
        # (s, a) = (2, -1): mu = 0.5*2 + 1*(-1) + 0.1 = 0.1 ; log_std = -0.4 - 0.3 - 0.4 = -1.1
        q = encode_sa(m, np.array([2.0]), np.array([-1.0]))
        np.testing.assert_allclose(q.mean, [0.1], atol=1e-15)
        np.testing.assert_allclose(q.std, [np.exp(-1.1)], rtol=1e-14)
        # s' = 0.5: mu = 1.0 - 1.0 = 0.0 ; log_std = -0.25 + 0.2 = -0.05
        r = encode_sp(m, np.array([0.5]))
        np.testing.assert_allclose(r.mean, [0.0], atol=1e-15)
        np.testing.assert_allclose(r.std, [np.exp(-0.05)], rtol=1e-14)
        # z = 2: mu = 3.0 + 0.5 ; log_std = 0.5 - 0.1
        d = decode(m, np.array([2.0]))
        np.testing.assert_allclose(d.mean, [3.5], atol=1e-15)
        np.testing.assert_allclose(d.std, [np.exp(0.4)], rtol=1e-14)

    def test_std_clamped(self):
        m = tiny_model()
        q = encode_sa(m, np.array([0.0]), np.array([1000.0]))
        assert q.std[0] == pytest.approx(1e4)
        q = encode_sa(m, np.array([0.0]), np.array([-1000.0]))
        assert q.std[0] == pytest.approx(1e-4)

    def test_shape_errors(self):
        m = DaspModel.zeros(4, 2, 3, 5)
        with pytest.raises(ShapeError):
            encode_sa(m, np.ones(3), np.ones(2))
        with pytest.raises(ShapeError):
            decode(m, np.ones(4))


class TestLoss:
    def test_perfect_model_total_zero(self):
        m = DaspModel.zeros(2, 1, latent_dim=2, hidden=3)
        s_next = np.array([0.7, -1.3])
        m.decoder.layers[-1].bias[:2] = s_next  # decoder mean is constant s'
        bd = dasp_loss(m, np.zeros(2), np.zeros(1), s_next, Rng(0))
        assert (bd.recon, bd.prior_kl, bd.enc_kl, bd.total) == (0.0, 0.0, 0.0, 0.0)

    def test_encoder_mean_shift(self):
        m = DaspModel.zeros(1, 1, latent_dim=1, hidden=2)
        m.encoder_sp.layers[-1].bias[0] = 2.0
        bd = dasp_loss(m, np.zeros(1), np.zeros(1), np.zeros(1), Rng(0))
        assert bd.enc_kl == pytest.approx(2.0, abs=1e-15)
        assert bd.prior_kl == 0.0

    @pytest.mark.parametrize("normalized", [False, True])
    def test_term_by_term_recomposition(self, normalized):
        m = DaspModel.create(3, 2, Rng(4), latent_dim=4, hidden=6)
        if normalized:
            m.state_mean = np.array([0.3, -0.1, 1.0])
            m.state_std = np.array([0.5, 2.0, 1.5])
        s, a, s2 = np.array([0.2, -1.0, 0.5]), np.array([0.3, 0.9]), np.array([1.1, 0.0, -0.4])
        bd = dasp_loss(m, s, a, s2, Rng(17))
        eps = Rng(17).normal((1, 4))[0]
        q_sa, q_sp = encode_sa(m, s, a), encode_sp(m, s2)
        z = q_sa.mean + q_sa.std * eps
        recon = np.sum(((decode(m, z).mean - s2) / m.state_std) ** 2)
        prior = kl_diag_gaussian(q_sa, DiagGaussian(np.zeros(4), np.ones(4)))
        enc = kl_diag_gaussian(q_sp, q_sa)
        assert bd.recon == pytest.approx(recon, abs=1e-10)
        assert bd.prior_kl == pytest.approx(prior, abs=1e-10)
        assert bd.enc_kl == pytest.approx(enc, abs=1e-10)
        assert bd.total == pytest.approx(recon + prior + enc, abs=1e-10)

    def test_breakdown_additivity_batch(self):
        m = DaspModel.create(4, 2, Rng(5), 3, 8)
        rng = Rng(6)
        bd = dasp_loss(m, rng.normal((50, 4)), rng.normal((50, 2)), rng.normal((50, 4)), Rng(1))
        np.testing.assert_allclose(bd.total, bd.recon + bd.prior_kl + bd.enc_kl, atol=1e-12, rtol=0)
        assert np.all(bd.prior_kl >= 0) and np.all(bd.enc_kl >= 0)

    def test_gradients_match_finite_differences(self):
        rng = Rng(7)
        m = DaspModel.create(3, 2, rng, latent_dim=3, hidden=5)
        m.state_mean = np.array([0.1, 0.0, -0.3])
        m.state_std = np.array([0.7, 1.3, 2.0])
        for p in m.params():
            p += 0.1 * rng.normal(p.shape)
        s, a, s2, eps = rng.normal((4, 3)), rng.normal((4, 2)), rng.normal((4, 3)), rng.normal((4, 3))
        f = lambda: dasp_loss_grads(m, s, a, s2, eps)[0].total
        _, grads, inputs = dasp_loss_grads(m, s, a, s2, eps)
        numeric = fd_grad(f, m.params() + [s, a, s2])
        for name, analytic, num in zip(m.param_names() + ["s", "a", "s_next"], grads + list(inputs), numeric):
            assert rel_err(analytic, num) <= 1e-4, name

    def test_non_finite_loss_names_term(self):
        m = DaspModel.zeros(1, 1, 1, 2)
        m.decoder.layers[-1].bias[0] = np.inf
        with pytest.raises(NumericFault, match="recon"):
            dasp_loss(m, np.zeros(1), np.zeros(1), np.zeros(1), Rng(0))


class TestPretrain:
    def test_zero_learning_rate_keeps_parameters(self):
        d = linear_gaussian(64, 0)
        m = DaspModel.create(1, 1, Rng(0), 2, 8)
        before = [p.copy() for p in m.params()]
        pretrain_dasp(m, d, DaspConfig(latent_dim=2, hidden=8, epochs=1, steps_per_epoch=1, lr=0.0,
                                       normalize_states=False), Rng(1))
        assert all(np.array_equal(b, p) for b, p in zip(before, m.params()))

    def test_empty_dataset(self):
        d = linear_gaussian(1, 0)
        d.states = d.states[:0]
        with pytest.raises(ConfigError):
            pretrain_dasp(DaspModel.create(1, 1, Rng(0), 2, 8), d, DaspConfig(), Rng(0))

    def test_determinism(self):
        d = linear_gaussian(500, 1)
        cfg = DaspConfig(latent_dim=2, hidden=8, epochs=3, steps_per_epoch=10, batch_size=32)
        runs = [pretrain_dasp(DaspModel.create(1, 1, Rng(3), 2, 8), d, cfg, Rng(4))[0] for _ in range(2)]
        assert all(np.array_equal(p, q) for p, q in zip(runs[0].params(), runs[1].params()))

    def test_loss_curve_csv(self, tmp_path):
        d = linear_gaussian(200, 1)
        cfg = DaspConfig(latent_dim=2, hidden=8, epochs=2, steps_per_epoch=3, batch_size=16)
        _, curve = pretrain_dasp(DaspModel.create(1, 1, Rng(3), 2, 8), d, cfg, Rng(4))
        write_loss_curve(tmp_path / "c.csv", curve)
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "epoch,recon,prior_kl,enc_kl,total"
        assert len(lines) == 3


@pytest.fixture(scope="module")
def linear_model():
    # raw units, large enough that the fit is well above the irreducible loss floor
    train = linear_gaussian(4000, 10, scale=5.0)
    cfg = DaspConfig(latent_dim=2, hidden=32, epochs=100, steps_per_epoch=50, batch_size=128,
                     normalize_states=False)
    m = DaspModel.create(1, 1, Rng(11), 2, 32)
    untrained = m.copy()
    m, _ = pretrain_dasp(m, train, cfg, Rng(12))
    return m, untrained, train


class TestLinearGaussian:
    def test_recon_improves_fivefold(self, linear_model):
        m, untrained, d = linear_model
        s, a, s2 = d.states[:2000], d.actions[:2000], d.next_states[:2000]
        assert np.array_equal(untrained.state_std, m.state_std)
        before = np.mean(dasp_loss(untrained, s, a, s2, Rng(0)).recon)
        after = np.mean(dasp_loss(m, s, a, s2, Rng(0)).recon)
        assert before >= 5 * after

    def test_prediction_beats_mean_baseline(self, linear_model):
        m, _, train = linear_model
        test = linear_gaussian(2000, 99, scale=5.0)
        pred, _ = predict_next(m, test.states, test.actions, Rng(1), deterministic=True)
        model_err = np.mean(np.abs(pred - test.next_states))
        baseline_err = np.mean(np.abs(train.next_states.mean() - test.next_states))
        assert model_err < baseline_err

    def test_objective_bounds_true_log_density(self):
        train = linear_gaussian(4000, 10)
        cfg = DaspConfig(latent_dim=2, hidden=32, epochs=60, steps_per_epoch=50, batch_size=128)
        m, _ = pretrain_dasp(DaspModel.create(1, 1, Rng(11), 2, 32), train, cfg, Rng(12))
        test = linear_gaussian(20000, 5)
        obj = np.mean(variational_objective(m, test.states, test.actions, test.next_states, Rng(1)))
        true = np.mean(norm.logpdf(test.next_states[:, 0], 0.0, np.sqrt(test.var)))
        assert obj - true <= 0.05

    def test_deterministic_prediction_is_decoder_mean(self, linear_model):
        m = linear_model[0]
        s, a = np.array([0.4]), np.array([-0.2])
        pred, dist = predict_next(m, s, a, Rng(0), deterministic=True)
        expected = decode(m, encode_sa(m, s, a).mean).mean
        np.testing.assert_array_equal(pred, expected)
        np.testing.assert_array_equal(dist.mean, expected)

    def test_sampled_prediction_reproducible(self, linear_model):
        m = linear_model[0]
        s, a = np.array([0.4]), np.array([-0.2])
        for noise in (False, True):
            p1, _ = predict_next(m, s, a, Rng(5), decoder_noise=noise)
            p2, _ = predict_next(m, s, a, Rng(5), decoder_noise=noise)
            assert np.array_equal(p1, p2)


class TestDensityScore:
    def test_zero_loss_model(self):
        m = DaspModel.zeros(2, 1, latent_dim=2, hidden=3)
        # decoder ignores z and predicts a constant; the score is evaluated on that prediction
        m.decoder.layers[-1].bias[:2] = [0.3, 0.4]
        assert density_score(m, np.zeros(2), np.zeros(1), tau=0.0, n_samples=3, rng=Rng(0)) == 0.0

    def test_clip_semantics(self):
        np.testing.assert_array_equal(clip_score(np.array([-3.0, 5.0]), 0.0), [-3.0, 0.0])

    def test_never_above_tau(self):
        m = DaspModel.create(4, 2, Rng(1), 3, 8)
        rng = Rng(2)
        for tau in (-5.0, -1.0, 0.0):
            sc = density_score(m, rng.normal((100, 4)), rng.normal((100, 2)), tau, 2, Rng(3))
            assert np.all(sc <= tau)

    def test_nan_model_rejected(self):
        m = DaspModel.zeros(1, 1, 1, 2)
        m.encoder_sa.layers[0].weight[0, 0] = np.nan
        with pytest.raises(NumericFault):
            density_score(m, np.zeros(1), np.zeros(1), 0.0, 1, Rng(0))

    def test_score_is_reproducible(self):
        m = DaspModel.create(4, 2, Rng(1), 3, 8)
        s, a = np.ones(4), np.zeros(2)
        assert density_score(m, s, a, 0.0, 2, Rng(9)) == density_score(m, s, a, 0.0, 2, Rng(9))


@pytest.fixture(scope="module")
def pointmass_dasp(env):
    from dasp.envs import generate_dataset
    ds = generate_dataset(env, "medium", 20000, 21)
    cfg = DaspConfig(epochs=80, steps_per_epoch=50)
    m = DaspModel.create(4, 2, Rng(22), cfg.latent_dim, cfg.hidden)
    m, _ = pretrain_dasp(m, ds, cfg, Rng(23))
    return m, ds


class TestPointMassScore:
    def test_behavior_actions_score_higher(self, env, pointmass_dasp):
        m, ds = pointmass_dasp
        idx = Rng(0).integers(0, len(ds), size=4000)
        s = ds.states[idx]
        safe = np.exp(density_score(m, s, ExpertPolicy(env)(s), 0.0, 1, Rng(1))).mean()
        unsafe = np.exp(density_score(m, s, RandomPolicy()(s, Rng(2)), 0.0, 1, Rng(1))).mean()
        assert safe > unsafe

    def test_score_decreases_with_state_corruption(self, env, pointmass_dasp):
        m, ds = pointmass_dasp
        levels = (0.0, 0.1, 0.3, 1.0)
        inversions = 0
        for seed in range(10):
            rng = Rng(100 + seed)
            idx = rng.integers(0, len(ds), size=1000)
            s, a = ds.states[idx], ds.actions[idx]
            noise = rng.normal(s.shape)
            means = [np.mean(density_score(m, s + lvl * noise, a, 0.0, 1, Rng(seed))) for lvl in levels]
            inversions += sum(b > a_ for a_, b in zip(means, means[1:]))
        assert inversions <= 1
