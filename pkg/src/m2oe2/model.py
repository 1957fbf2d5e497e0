"""The assembled forecaster: expert-modulated inputs feeding a GRU stack.

One :class:`Forecaster` owns the parameter set for a configuration and
runs batched context passes.  With ``use_experts`` off it degrades to the
plain-GRU base model driven by the static projection alone, which is the
built-in baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import gru, moe
from .config import ModelConfig, model_config_from_json, model_config_json, seed_stream, STREAM_INIT

CHECKPOINT_CONFIG_KEY = "__model_config__"
CHECKPOINT_GROUPS_KEY = "__groups__"
CHECKPOINT_FINGERPRINT_KEY = "__stats_fingerprint__"


def build_params(cfg, rng):
    ps = ad.ParamSet()
    gru.init_gru_params(ps, cfg, rng)
    gru.init_head_params(ps, cfg, rng)
    moe.init_expert_params(ps, cfg, rng)
    moe.init_gate_params(ps, cfg, rng)
    moe.init_shortcut_params(ps, cfg, rng)
    return ps


@dataclass
class ContextState:
    """Result of consuming one batch of context windows."""

    top: ad.Tensor            # (B, hidden) after the final step
    prev_top: ad.Tensor       # (B, hidden) before the final step
    x_last: ad.Tensor         # (B, n_series) newest observed loads
    gate_trace: list          # per-step (logits, weights) arrays when collected


class Forecaster:
    def __init__(self, config: ModelConfig, seed=0, params=None):
        self.config = config.validate()
        self.params = params if params is not None else build_params(
            config, seed_stream(seed, STREAM_INIT))
        self.stats_fingerprint = None

    # ------------------------------------------------------------------
    # forward passes

    def forward_context(self, loads, externals, collect_gates=False):
        """Run the recurrence over a batch of equal-length contexts.

        loads: (B, T, n_series); externals: (B, T, n_experts), both already
        normalized.  The gate at step t reads the top-layer state from
        step t-1 (zero at t=0), so expert selection never depends on the
        step it is modulating.
        """
        cfg = self.config
        ps = self.params
        loads = np.asarray(loads, dtype=np.float64)
        batch, steps, _ = loads.shape
        loads_t = ad.tensor(loads)

        if cfg.use_experts:
            externals = np.asarray(externals, dtype=np.float64)
            flat = ad.tensor(externals.reshape(batch * steps, cfg.n_experts))
            eouts = ad.reshape(moe.expert_outputs(flat, ps, cfg.n_experts),
                               (batch, steps, cfg.n_experts, cfg.expert_out_dim))
        else:
            # static projection: modulated inputs for the whole window at once
            flat_loads = ad.reshape(loads_t, (batch * steps, cfg.n_series))
            proj_all = ad.reshape(ad.matmul(flat_loads, ps["static_proj"]),
                                  (batch, steps, cfg.proj_dim))

        hidden = [ad.tensor(np.zeros((batch, cfg.hidden_dim)))
                  for _ in range(cfg.n_layers)]
        prev_top = hidden[-1]
        trace = []
        for t in range(steps):
            if cfg.use_experts:
                x_t = ad.step_slice(loads_t, t)
                logits = moe.gate_logits(hidden[-1], ps)
                weights = ad.topm_softmax(logits, cfg.top_m)
                theta = moe.compose_theta(weights, ad.step_slice(eouts, t), ps, cfg)
                x_proj = moe.modulate_input(theta, x_t)
                if collect_gates:
                    trace.append((logits.data.copy(), weights.data.copy()))
            else:
                x_proj = ad.step_slice(proj_all, t)
            prev_top = hidden[-1]
            hidden = gru.gru_step(x_proj, hidden, ps, cfg.n_layers)

        return ContextState(top=hidden[-1], prev_top=prev_top,
                            x_last=ad.step_slice(loads_t, steps - 1),
                            gate_trace=trace)

    def predict_distribution(self, loads, externals, n_samples=None, rng=None):
        """Predictive distribution per instance in a (B, T, ...) batch."""
        cfg = self.config
        with ad.no_grad():
            state = self.forward_context(loads, externals)
        if cfg.head == "variational":
            if rng is None:
                rng = np.random.default_rng(0)
            return [gru.mc_forecast(state.x_last.data[b], state.top.data[b],
                                    self.params, cfg, n_samples=n_samples, rng=rng)
                    for b in range(loads.shape[0])]
        shape = (cfg.horizon, cfg.n_series)
        with ad.no_grad():
            if cfg.head == "gaussian":
                mean, logvar = gru.gaussian_head(state.top, self.params)
                stds = np.exp(0.5 * np.clip(logvar.data, ad.EXP_MIN, ad.EXP_MAX))
                return [gru.ForecastDistribution(m.reshape(shape), s.reshape(shape))
                        for m, s in zip(mean.data, stds)]
            point = gru.deterministic_head(state.top, self.params)
            return [gru.ForecastDistribution(m.reshape(shape), np.zeros(shape))
                    for m in point.data]

    def gate_trace(self, loads, externals):
        """Per-step gate telemetry for a single context (T, ...) series."""
        if not self.config.use_experts:
            raise ValueError("gate trace requires use_experts=true")
        with ad.no_grad():
            state = self.forward_context(loads[None], externals[None],
                                         collect_gates=True)
        rows = []
        for logits, weights in state.gate_trace:
            rows.append((logits[0], weights[0], np.flatnonzero(weights[0])))
        return rows

    # ------------------------------------------------------------------
    # persistence

    def save(self, path, stats_fingerprint=None):
        payload = dict(self.params.arrays())
        payload[CHECKPOINT_CONFIG_KEY] = np.frombuffer(
            model_config_json(self.config).encode(), dtype=np.uint8)
        payload[CHECKPOINT_GROUPS_KEY] = np.frombuffer(
            json.dumps(self.params.groups(), sort_keys=True).encode(), dtype=np.uint8)
        fp = stats_fingerprint if stats_fingerprint is not None else self.stats_fingerprint
        if fp is not None:
            payload[CHECKPOINT_FINGERPRINT_KEY] = np.frombuffer(
                str(fp).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path):
        with np.load(path) as archive:
            cfg = model_config_from_json(
                bytes(archive[CHECKPOINT_CONFIG_KEY]).decode())
            groups = json.loads(bytes(archive[CHECKPOINT_GROUPS_KEY]).decode())
            ps = ad.ParamSet()
            for name, group in groups.items():
                ps.add(group, name, archive[name])
            model = cls(cfg, params=ps)
            if CHECKPOINT_FINGERPRINT_KEY in archive.files:
                model.stats_fingerprint = bytes(
                    archive[CHECKPOINT_FINGERPRINT_KEY]).decode()
        return model

    def clone_as_base(self):
        """A copy of this configuration with the expert pathway disabled."""
        import dataclasses
        cfg = dataclasses.replace(self.config, use_experts=False)
        return Forecaster(cfg, params=self.params)
