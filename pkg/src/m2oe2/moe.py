"""Hypernetwork experts, sparse gating, and residual input modulation.

Each external source owns one two-layer tanh expert that emits a
flattened input-projection matrix, normalized per row so heterogeneous
sources contribute on a common scale.  A gate over the previous hidden
state keeps only the strongest ``top_m`` experts, and the weighted sum
rides on a static shortcut matrix so the model can always fall back to
plain-GRU behavior.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

LN_EPS = 1e-5


def init_expert_params(ps, cfg, rng):
    # Expert hidden width equals the flattened projection size.  The final
    # layer and the LN gain start small (a tenth of the shortcut's scale)
    # so training begins close to the base model.
    d = cfg.expert_out_dim
    bound = 0.1 / np.sqrt(cfg.proj_dim)
    for j in range(cfg.n_experts):
        pre = f"expert{j}"
        ps.add("experts", f"{pre}/W_in", rng.uniform(-1.0, 1.0, size=(1, d)))
        ps.add("experts", f"{pre}/b_in", np.zeros(d))
        ps.add("experts", f"{pre}/W_out", rng.uniform(-bound, bound, size=(d, d)))
        ps.add("experts", f"{pre}/b_out", np.zeros(d))
        ps.add("experts", f"{pre}/ln_gain", np.full(d, bound))
        ps.add("experts", f"{pre}/ln_bias", np.zeros(d))


def init_gate_params(ps, cfg, rng):
    bound = 1.0 / np.sqrt(cfg.hidden_dim)
    ps.add("gate", "gate/W", rng.uniform(-bound, bound, size=(cfg.hidden_dim, cfg.n_experts)))
    # small random bias: the zero initial state would otherwise tie every
    # logit at step one, making top-m selection sit on a discontinuity
    ps.add("gate", "gate/b", rng.uniform(-0.1, 0.1, size=cfg.n_experts))


def init_shortcut_params(ps, cfg, rng):
    bound = 1.0 / np.sqrt(cfg.proj_dim)
    ps.add("theta0", "static_proj",
           rng.uniform(-bound, bound, size=(cfg.n_series, cfg.proj_dim)))


def expert_forward(values, ps, expert_idx):
    """One expert's normalized flattened projection for a column of
    external scalars; ``values`` is a (rows, 1) Tensor."""
    if not np.all(np.isfinite(values.data)):
        raise ValueError(f"expert {expert_idx}: non-finite external input")
    pre = f"expert{expert_idx}"
    hidden = ad.tanh(ad.affine(values, ps[f"{pre}/W_in"], ps[f"{pre}/b_in"]))
    raw = ad.affine(hidden, ps[f"{pre}/W_out"], ps[f"{pre}/b_out"])
    return ad.layer_norm(raw, ps[f"{pre}/ln_gain"], ps[f"{pre}/ln_bias"], eps=LN_EPS)


def expert_outputs(externals, ps, n_experts):
    """All experts over a (rows, n_experts) block -> (rows, n_experts, d)."""
    rows = externals.shape[0]
    outs = []
    for j in range(n_experts):
        col = ad.reshape(ad.step_slice(externals, j), (rows, 1))
        outs.append(expert_forward(col, ps, j))
    return ad.stack(outs, axis=1)


def gate_logits(h_prev, ps):
    return ad.affine(h_prev, ps["gate/W"], ps["gate/b"])


def gate(h_prev, ps, top_m):
    """Sparse mixing weights: exactly ``top_m`` nonzeros summing to 1."""
    return ad.topm_softmax(gate_logits(h_prev, ps), top_m)


def compose_theta(gates, experts, ps, cfg):
    """Gated expert sum plus the static shortcut, shaped for modulation.

    gates (B, M) x experts (B, M, d) -> (B, n_series, proj_dim).
    """
    mixed = ad.mix(gates, experts)
    shaped = ad.reshape(mixed, (gates.shape[0], cfg.n_series, cfg.proj_dim))
    return ad.add(shaped, ps["static_proj"])


def modulate_input(theta, x):
    """Project the raw load vector through the per-step matrix.

    theta (B, n_series, proj_dim) applied to x (B, n_series) -> (B, proj_dim).
    """
    if theta.shape[:2] != x.shape:
        raise ad.ShapeMismatch("modulate_input", theta.shape, x.shape)
    if x.shape[1] == 1:  # univariate: plain scalar-times-row broadcast
        return ad.mul(ad.reshape(theta, (theta.shape[0], theta.shape[2])), x)
    return ad.mix(x, theta)


layer_norm = ad.layer_norm
