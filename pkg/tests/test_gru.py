"""Recurrence and head behavior, including Monte Carlo forecasting."""

import numpy as np
import pytest

from m2oe2 import autodiff as ad
from m2oe2 import gru
from m2oe2.config import ModelConfig


def _cfg(**kw):
    base = dict(n_series=1, proj_dim=6, hidden_dim=5, latent_dim=4, n_layers=2,
                horizon=3, n_experts=3, top_m=2, head="variational")
    base.update(kw)
    return ModelConfig(**base).validate()


def _params(cfg, seed=0, zero=False):
    ps = ad.ParamSet()
    rng = np.random.default_rng(seed)
    gru.init_gru_params(ps, cfg, rng)
    gru.init_head_params(ps, cfg, rng)
    if zero:
        for _, t in ps.items():
            t.data[...] = 0.0
    return ps


class TestGruStep:
    def test_zero_parameters_map_zero_state_to_zero(self):
        # gates sit at 0.5 and the candidate at tanh(0)=0, so the blend stays 0
        cfg = _cfg()
        ps = _params(cfg, zero=True)
        x = ad.tensor(np.random.default_rng(1).uniform(-2, 2, (4, cfg.proj_dim)))
        hidden = [ad.tensor(np.zeros((4, cfg.hidden_dim))) for _ in range(cfg.n_layers)]
        out = gru.gru_step(x, hidden, ps, cfg.n_layers)
        for h in out:
            np.testing.assert_array_equal(h.data, 0.0)

    def test_zero_input_zero_state_is_fixed_point(self):
        cfg = _cfg()
        ps = _params(cfg, seed=3)
        for layer in range(cfg.n_layers):  # zero biases only
            for g in ("update", "reset", "cand"):
                ps[f"gru{layer}/b_{g}"].data[...] = 0.0
        x = ad.tensor(np.zeros((2, cfg.proj_dim)))
        hidden = [ad.tensor(np.zeros((2, cfg.hidden_dim))) for _ in range(cfg.n_layers)]
        out = gru.gru_step(x, hidden, ps, cfg.n_layers)
        for h in out:
            np.testing.assert_array_equal(h.data, 0.0)

    def test_hand_evaluation_against_direct_formula(self):
        cfg = _cfg(n_layers=1)
        ps = _params(cfg, seed=5)
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, (3, cfg.proj_dim))
        h0 = rng.uniform(-1, 1, (3, cfg.hidden_dim))
        out = gru.gru_step(ad.tensor(x), [ad.tensor(h0)], ps, 1)[0]

        def sig(v):
            return 1 / (1 + np.exp(-v))

        z = sig(x @ ps["gru0/W_update"].data + h0 @ ps["gru0/U_update"].data
                + ps["gru0/b_update"].data)
        r = sig(x @ ps["gru0/W_reset"].data + h0 @ ps["gru0/U_reset"].data
                + ps["gru0/b_reset"].data)
        c = np.tanh(x @ ps["gru0/W_cand"].data + (r * h0) @ ps["gru0/U_cand"].data
                    + ps["gru0/b_cand"].data)
        np.testing.assert_allclose(out.data, z * h0 + (1 - z) * c, rtol=1e-12)

    def test_reference_stack_shape(self):
        cfg = _cfg(proj_dim=40, hidden_dim=64, n_layers=4)
        ps = _params(cfg, seed=1)
        x = ad.tensor(np.zeros((2, 40)))
        hidden = [ad.tensor(np.zeros((2, 64))) for _ in range(4)]
        out = gru.gru_step(x, hidden, ps, 4)
        assert len(out) == 4 and all(h.shape == (2, 64) for h in out)

    def test_width_mismatch_rejected(self):
        cfg = _cfg()
        ps = _params(cfg)
        bad = ad.tensor(np.zeros((2, cfg.proj_dim + 1)))
        hidden = [ad.tensor(np.zeros((2, cfg.hidden_dim))) for _ in range(cfg.n_layers)]
        with pytest.raises(ad.ShapeMismatch):
            gru.gru_step(bad, hidden, ps, cfg.n_layers)

    def test_batched_equals_per_instance(self):
        cfg = _cfg(n_layers=1)
        ps = _params(cfg, seed=11)
        rng = np.random.default_rng(13)
        x = rng.uniform(-1, 1, (5, cfg.proj_dim))
        h0 = rng.uniform(-1, 1, (5, cfg.hidden_dim))
        batched = gru.gru_step(ad.tensor(x), [ad.tensor(h0)], ps, cfg.n_layers)
        for b in range(5):
            single = gru.gru_step(ad.tensor(x[b:b + 1]),
                                  [ad.tensor(h0[b:b + 1])], ps, cfg.n_layers)
            np.testing.assert_allclose(single[0].data[0], batched[0].data[b],
                                       atol=1e-12)


class TestHeads:
    def test_deterministic_constant_when_weights_zero(self):
        cfg = _cfg(head="deterministic")
        ps = _params(cfg, zero=True)
        ps["head/b_out"].data[...] = 7.5
        out = gru.deterministic_head(ad.tensor(np.random.default_rng(0)
                                               .uniform(-3, 3, (4, cfg.hidden_dim))), ps)
        np.testing.assert_array_equal(out.data, 7.5)

    def test_deterministic_basis_vector_selects_weight_row(self):
        cfg = _cfg(head="deterministic")
        ps = _params(cfg, seed=2)
        e1 = np.zeros((1, cfg.hidden_dim))
        e1[0, 0] = 1.0
        ps["head/b_out"].data[...] = 0.0
        out = gru.deterministic_head(ad.tensor(e1), ps)
        np.testing.assert_allclose(out.data[0], ps["head/W_out"].data[0])

    def test_deterministic_output_width(self):
        cfg = _cfg(head="deterministic", horizon=3, n_series=1)
        ps = _params(cfg)
        out = gru.deterministic_head(ad.tensor(np.zeros((1, cfg.hidden_dim))), ps)
        assert out.shape == (1, 3)

    def test_gaussian_zero_parameters_give_unit_std(self):
        cfg = _cfg(head="gaussian")
        ps = _params(cfg, zero=True)
        mean, logvar = gru.gaussian_head(ad.tensor(np.ones((2, cfg.hidden_dim))), ps)
        np.testing.assert_array_equal(mean.data, 0.0)
        np.testing.assert_array_equal(np.exp(0.5 * logvar.data), 1.0)

    def test_gaussian_logvar_bias_sets_std(self):
        cfg = _cfg(head="gaussian")
        ps = _params(cfg, zero=True)
        s = 3.7
        ps["head/b_logvar"].data[...] = 2.0 * np.log(s)
        _, logvar = gru.gaussian_head(ad.tensor(np.ones((1, cfg.hidden_dim))), ps)
        np.testing.assert_allclose(np.exp(0.5 * logvar.data), s, rtol=1e-12)

    def test_logvar_minus_four_means_std_e_minus_two(self):
        np.testing.assert_allclose(np.exp(0.5 * -4.0), 0.1353352832366127)

    def test_encoder_zero_parameters_is_standard_normal(self):
        cfg = _cfg(latent_dim=32)
        ps = _params(cfg, zero=True)
        mean, logvar = gru.encode_latent(ad.tensor(np.ones((2, 1))),
                                         ad.tensor(np.ones((2, cfg.hidden_dim))), ps)
        assert mean.shape == (2, 32) and logvar.shape == (2, 32)
        np.testing.assert_array_equal(mean.data, 0.0)
        np.testing.assert_array_equal(logvar.data, 0.0)

    def test_decoder_is_pure_function(self):
        cfg = _cfg()
        ps = _params(cfg, seed=9)
        z = ad.tensor(np.random.default_rng(4).uniform(-1, 1, (3, cfg.latent_dim)))
        m1, lv1 = gru.decode(z, ps)
        m2, lv2 = gru.decode(z, ps)
        np.testing.assert_array_equal(m1.data, m2.data)
        np.testing.assert_array_equal(lv1.data, lv2.data)
        assert m1.shape == (3, cfg.out_dim)


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        mu = ad.tensor([[0.3, -0.7]])
        z = gru.reparameterize(mu, ad.tensor([[0.1, 0.2]]), ad.tensor([[0.0, 0.0]]))
        np.testing.assert_array_equal(z.data, mu.data)

    def test_standard_normal_passthrough(self):
        eps = ad.tensor([[1.5, -2.5]])
        z = gru.reparameterize(ad.tensor([[0.0, 0.0]]), ad.tensor([[0.0, 0.0]]), eps)
        np.testing.assert_array_equal(z.data, eps.data)

    def test_hand_value(self):
        z = gru.reparameterize(ad.tensor([[1.0]]), ad.tensor([[2.0 * np.log(2.0)]]),
                               ad.tensor([[0.5]]))
        np.testing.assert_allclose(z.data, [[2.0]], rtol=1e-12)


class TestMcForecast:
    def test_sample_count_floor(self):
        cfg = _cfg()
        ps = _params(cfg)
        with pytest.raises(ValueError, match="at least 2"):
            gru.mc_forecast(np.zeros(1), np.zeros(cfg.hidden_dim), ps, cfg, n_samples=1)

    def test_zero_parameters_match_standard_normal(self):
        cfg = _cfg()
        ps = _params(cfg, zero=True)
        dist = gru.mc_forecast(np.zeros(1), np.zeros(cfg.hidden_dim), ps, cfg,
                               n_samples=10000, rng=np.random.default_rng(42))
        assert np.all(np.abs(dist.mean) < 0.05)
        assert np.all(np.abs(dist.std - 1.0) < 0.05)

    def test_degenerate_variances_collapse_to_decoded_mean(self):
        cfg = _cfg()
        ps = _params(cfg, seed=21)
        ps["enc/b_logvar"].data[...] = -200.0   # clamped exp floor
        ps["enc/W_x_logvar"].data[...] = 0.0
        ps["enc/W_h_logvar"].data[...] = 0.0
        ps["dec/b_logvar"].data[...] = -200.0
        ps["dec/W_logvar"].data[...] = 0.0
        x_last = np.array([0.4])
        h = np.random.default_rng(5).uniform(-1, 1, cfg.hidden_dim)
        dist = gru.mc_forecast(x_last, h, ps, cfg, n_samples=64,
                               rng=np.random.default_rng(0))
        mu_z = (x_last[None] @ ps["enc/W_x_mean"].data
                + h[None] @ ps["enc/W_h_mean"].data + ps["enc/b_mean"].data)
        decoded = mu_z @ ps["dec/W_mean"].data + ps["dec/b_mean"].data
        np.testing.assert_allclose(dist.mean.ravel(), decoded.ravel(), atol=1e-6)
        assert np.all(dist.std < 1e-6)

    def test_seeded_determinism(self):
        cfg = _cfg()
        ps = _params(cfg, seed=8)
        args = (np.array([0.2]), np.zeros(cfg.hidden_dim), ps, cfg)
        d1 = gru.mc_forecast(*args, n_samples=100, rng=np.random.default_rng(7))
        d2 = gru.mc_forecast(*args, n_samples=100, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(d1.mean, d2.mean)
        np.testing.assert_array_equal(d1.std, d2.std)
        np.testing.assert_array_equal(d1.samples, d2.samples)

    def test_reported_stats_equal_sample_stats_exactly(self):
        cfg = _cfg()
        ps = _params(cfg, seed=10)
        dist = gru.mc_forecast(np.array([0.1]), np.zeros(cfg.hidden_dim), ps, cfg,
                               n_samples=50, rng=np.random.default_rng(3))
        flat = dist.samples.reshape(50, -1)
        np.testing.assert_array_equal(dist.mean.ravel(), flat.mean(axis=0))
        np.testing.assert_array_equal(dist.std.ravel(), flat.std(axis=0, ddof=1))

    def test_predictive_std_strictly_positive(self):
        cfg = _cfg()
        for seed in range(5):
            ps = _params(cfg, seed=seed)
            dist = gru.mc_forecast(np.array([0.5]), np.ones(cfg.hidden_dim), ps, cfg,
                                   n_samples=32, rng=np.random.default_rng(seed))
            assert np.all(dist.std > 0)
