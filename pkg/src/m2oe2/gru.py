"""Multi-layer GRU recurrence and the three interchangeable forecast heads.

The recurrence consumes the modulated input vector produced by the
mixture-of-experts projection; the first layer is ``proj_dim`` wide,
upper layers are ``hidden_dim`` wide.  Head output layers are linear so
means and log-variances are unbounded; squashing stays inside the cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_gru_params(ps, cfg, rng):
    """Per-layer update/reset/candidate weights in the ``base`` group."""
    for layer in range(cfg.n_layers):
        d_in = cfg.proj_dim if layer == 0 else cfg.hidden_dim
        d_h = cfg.hidden_dim
        for gate_name in ("update", "reset", "cand"):
            ps.add("base", f"gru{layer}/W_{gate_name}", _uniform(rng, (d_in, d_h), d_in))
            ps.add("base", f"gru{layer}/U_{gate_name}", _uniform(rng, (d_h, d_h), d_h))
            ps.add("base", f"gru{layer}/b_{gate_name}", np.zeros(d_h))


def gru_step(x, hidden, ps, n_layers):
    """Advance the stack one step; returns the new per-layer states.

    ``x`` is the (batch, proj_dim) modulated input, ``hidden`` a list of
    (batch, hidden_dim) states, one per layer, bottom first.
    """
    if len(hidden) != n_layers:
        raise ValueError(f"expected {n_layers} hidden states, got {len(hidden)}")
    inp = x
    new_hidden = []
    for layer in range(n_layers):
        h = hidden[layer]
        pre = f"gru{layer}"
        keep = ad.sigmoid(ad.affine2(inp, ps[f"{pre}/W_update"], h,
                                     ps[f"{pre}/U_update"], ps[f"{pre}/b_update"]))
        reset = ad.sigmoid(ad.affine2(inp, ps[f"{pre}/W_reset"], h,
                                      ps[f"{pre}/U_reset"], ps[f"{pre}/b_reset"]))
        cand = ad.tanh(ad.affine2(inp, ps[f"{pre}/W_cand"], ad.mul(reset, h),
                                  ps[f"{pre}/U_cand"], ps[f"{pre}/b_cand"]))
        h_new = ad.gate_blend(h, cand, keep)  # keep*h + (1-keep)*cand
        new_hidden.append(h_new)
        inp = h_new
    return new_hidden


def init_head_params(ps, cfg, rng):
    d_h, d_out = cfg.hidden_dim, cfg.out_dim
    if cfg.head == "deterministic":
        ps.add("heads", "head/W_out", _uniform(rng, (d_h, d_out), d_h))
        ps.add("heads", "head/b_out", np.zeros(d_out))
    elif cfg.head == "gaussian":
        ps.add("heads", "head/W_mean", _uniform(rng, (d_h, d_out), d_h))
        ps.add("heads", "head/b_mean", np.zeros(d_out))
        ps.add("heads", "head/W_logvar", _uniform(rng, (d_h, d_out), d_h))
        ps.add("heads", "head/b_logvar", np.zeros(d_out))
    elif cfg.head == "variational":
        d_x, d_z = cfg.n_series, cfg.latent_dim
        for stat in ("mean", "logvar"):
            ps.add("heads", f"enc/W_x_{stat}", _uniform(rng, (d_x, d_z), max(d_x, 1)))
            ps.add("heads", f"enc/W_h_{stat}", _uniform(rng, (d_h, d_z), d_h))
            ps.add("heads", f"enc/b_{stat}", np.zeros(d_z))
            ps.add("heads", f"dec/W_{stat}", _uniform(rng, (d_z, d_out), d_z))
            ps.add("heads", f"dec/b_{stat}", np.zeros(d_out))
    else:
        raise ValueError(f"unknown head {cfg.head!r}")


def deterministic_head(h, ps):
    """Linear point forecast over the concatenated horizon vector."""
    return ad.affine(h, ps["head/W_out"], ps["head/b_out"])


def gaussian_head(h, ps):
    """Mean and log-variance layers for the direct Gaussian forecast."""
    mean = ad.affine(h, ps["head/W_mean"], ps["head/b_mean"])
    logvar = ad.affine(h, ps["head/W_logvar"], ps["head/b_logvar"])
    return mean, logvar


def encode_latent(x_last, h_prev, ps):
    """Diagonal-Gaussian posterior over the latent, from the newest load
    observation and the hidden state that preceded it."""
    mean = ad.affine2(x_last, ps["enc/W_x_mean"], h_prev, ps["enc/W_h_mean"],
                      ps["enc/b_mean"])
    logvar = ad.affine2(x_last, ps["enc/W_x_logvar"], h_prev, ps["enc/W_h_logvar"],
                        ps["enc/b_logvar"])
    return mean, logvar


def reparameterize(mean, logvar, noise):
    """mean + exp(logvar / 2) * noise; keeps the draw differentiable."""
    return ad.add(mean, ad.mul(ad.exp(ad.scale(logvar, 0.5)), noise))


def decode(z, ps):
    """Gaussian over the horizon vector conditioned on a latent draw."""
    mean = ad.affine(z, ps["dec/W_mean"], ps["dec/b_mean"])
    logvar = ad.affine(z, ps["dec/W_logvar"], ps["dec/b_logvar"])
    return mean, logvar


@dataclass
class ForecastDistribution:
    """Per-step predictive mean/std in normalized units, plus optional draws."""

    mean: np.ndarray            # (horizon, n_series)
    std: np.ndarray             # (horizon, n_series), nonnegative
    samples: np.ndarray | None = None  # (n_draws, horizon, n_series)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError(
                f"mean/std shape mismatch: {self.mean.shape} vs {self.std.shape}")
        if np.any(self.std < 0):
            raise ValueError("predictive std must be nonnegative")


def mc_forecast(x_last, h_prev, ps, cfg, n_samples=None, rng=None):
    """Monte Carlo predictive distribution for one forecast origin.

    Draws latents from the posterior, decodes each into a Gaussian over
    the horizon vector, draws one output sample per latent, and reports
    the sample mean and (n-1)-denominator standard deviation.
    """
    n_samples = cfg.mc_samples if n_samples is None else int(n_samples)
    if n_samples < 2:
        raise ValueError(f"mc_forecast: need at least 2 samples, got {n_samples}")
    if rng is None:
        rng = np.random.default_rng(0)
    x_last = np.asarray(x_last, dtype=np.float64).reshape(1, cfg.n_series)
    h_prev = np.asarray(h_prev, dtype=np.float64).reshape(1, cfg.hidden_dim)
    with ad.no_grad():
        z_mean, z_logvar = encode_latent(ad.tensor(x_last), ad.tensor(h_prev), ps)
        z_std = np.exp(0.5 * np.clip(z_logvar.data, ad.EXP_MIN, ad.EXP_MAX))
        latent_draws = z_mean.data + z_std * rng.standard_normal(
            (n_samples, cfg.latent_dim))
        x_mean, x_logvar = decode(ad.tensor(latent_draws), ps)
        x_std = np.exp(0.5 * np.clip(x_logvar.data, ad.EXP_MIN, ad.EXP_MAX))
        draws = x_mean.data + x_std * rng.standard_normal((n_samples, cfg.out_dim))
    mean = draws.mean(axis=0)
    std = draws.std(axis=0, ddof=1)
    shape = (cfg.horizon, cfg.n_series)
    return ForecastDistribution(
        mean.reshape(shape), std.reshape(shape),
        samples=draws.reshape((n_samples,) + shape))
