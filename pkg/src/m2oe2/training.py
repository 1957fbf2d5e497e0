"""Losses, Adam optimization, and the reproducible epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import gru
from .config import TrainConfig, seed_stream, STREAM_NOISE, STREAM_BATCH
from .data import batch as make_batches
from .data import make_windows, split_instances, stack_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# losses (all differentiable through the recording engine)


def mse_loss(pred, target):
    """Mean over all elements of squared differences."""
    target = target if isinstance(target, ad.Tensor) else ad.tensor(target)
    if pred.shape != target.shape:
        raise ad.ShapeMismatch("mse_loss", pred.shape, target.shape)
    diff = ad.sub(pred, target)
    return ad.mean_all(ad.mul(diff, diff))


def nll_loss(mean, logvar, target):
    """Gaussian negative log-likelihood without the constant term:
    mean over elements of [logvar + (x - mean)^2 / var]."""
    target = target if isinstance(target, ad.Tensor) else ad.tensor(target)
    if mean.shape != target.shape:
        raise ad.ShapeMismatch("nll_loss", mean.shape, target.shape)
    diff = ad.sub(target, mean)
    sq = ad.mul(diff, diff)
    inv_var = ad.exp(ad.scale(logvar, -1.0))
    return ad.mean_all(ad.add(logvar, ad.mul(sq, inv_var)))


def kl_gaussian(mean, logvar):
    """KL(q || N(0, I)) closed form, summed over latent dimensions and
    averaged over the batch rows."""
    n_rows = mean.shape[0] if mean.data.ndim == 2 else 1
    var = ad.exp(logvar)
    inner = ad.sub(ad.sub(ad.add(var, ad.mul(mean, mean)), ad.tensor(1.0)), logvar)
    return ad.scale(ad.sum_all(inner), 0.5 / n_rows)


@dataclass
class ForwardResult:
    """Head outputs for one batch; which fields are set depends on ``head``."""

    head: str
    point: ad.Tensor | None = None
    mean: ad.Tensor | None = None
    logvar: ad.Tensor | None = None
    enc_mean: ad.Tensor | None = None
    enc_logvar: ad.Tensor | None = None
    dec_mean: ad.Tensor | None = None
    dec_logvar: ad.Tensor | None = None


def elbo_loss(result, target, kl_weight):
    """Decoder NLL plus weighted KL for one batch of forecast origins."""
    if result.head != "variational":
        raise ValueError(f"elbo_loss requires the variational head, got {result.head!r}")
    recon = nll_loss(result.dec_mean, result.dec_logvar, target)
    return ad.add(recon, ad.scale(kl_gaussian(result.enc_mean, result.enc_logvar),
                                  kl_weight))


def run_heads(model, state, noise=None, rng=None):
    """Apply the configured head to a processed context state.

    ``noise`` freezes the reparameterization draw (useful for gradient
    checks); otherwise ``rng`` supplies it.
    """
    cfg = model.config
    ps = model.params
    if cfg.head == "deterministic":
        return ForwardResult("deterministic",
                             point=gru.deterministic_head(state.top, ps))
    if cfg.head == "gaussian":
        mean, logvar = gru.gaussian_head(state.top, ps)
        return ForwardResult("gaussian", mean=mean, logvar=logvar)
    enc_mean, enc_logvar = gru.encode_latent(state.x_last, state.prev_top, ps)
    if noise is None:
        if rng is None:
            raise ValueError("variational head needs either noise or rng")
        noise = rng.standard_normal(enc_mean.shape)
    z = gru.reparameterize(enc_mean, enc_logvar, ad.tensor(noise))
    dec_mean, dec_logvar = gru.decode(z, ps)
    return ForwardResult("variational", enc_mean=enc_mean, enc_logvar=enc_logvar,
                         dec_mean=dec_mean, dec_logvar=dec_logvar)


def batch_loss(model, loads, externals, targets, kl_weight, noise=None, rng=None):
    """Context pass + head + loss for one stacked batch."""
    state = model.forward_context(loads, externals)
    result = run_heads(model, state, noise=noise, rng=rng)
    if result.head == "deterministic":
        return mse_loss(result.point, targets)
    if result.head == "gaussian":
        return nll_loss(result.mean, result.logvar, targets)
    return elbo_loss(result, targets, kl_weight)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment accumulators mirroring the parameter shapes."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def clip_gradients(grads, max_norm):
    """Scale all gradients so the global norm is at most ``max_norm``."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update; skips (and logs) non-finite gradients."""
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be > 0, got {lr}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.step_count += 1
        log.warning("adam_step: non-finite gradient at step %d, update skipped",
                    state.step_count)
        return False
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.beta1, state.beta2, state.eps
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        tensor.data -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
    return True


# ---------------------------------------------------------------------------
# epoch loop


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)   # (epoch, train_loss, val_loss)
    best_epoch: int = -1
    best_val: float = np.inf
    final_arrays: dict = field(default_factory=dict)
    epoch_seconds: list = field(default_factory=list)


def _epoch_loss(model, instances, dataset, cfg, kl_weight, noise_bank):
    """Recording-free loss over a fixed instance list (validation)."""
    if not instances:
        return None
    total, count = 0.0, 0
    with ad.no_grad():
        for batch_insts in make_batches(instances, 256, seed=0):
            loads, ext, targets = stack_batch(batch_insts, dataset, cfg.horizon)
            noise = noise_bank[[inst.origin for inst in batch_insts]] \
                if noise_bank is not None else None
            loss = batch_loss(model, loads, ext, targets, kl_weight, noise=noise)
            total += float(loss.data) * len(batch_insts)
            count += len(batch_insts)
    return total / count


def train_loop(model, dataset, train_cfg: TrainConfig, instances=None):
    """Mini-batch training with per-epoch history and best-val tracking.

    Fully reproducible from ``train_cfg.seed``: batch order, init, and
    reparameterization noise all fan out from it.  Returns the model
    holding the best-validation parameters.
    """
    cfg = model.config
    train_cfg.validate()
    if instances is None:
        instances = make_windows(dataset, cfg.horizon)
    splits = split_instances(instances, dataset)
    # the stride thins training and validation alike: a desk-scale budget
    # knob that leaves the two models' comparison untouched
    train_insts = splits["train"][::train_cfg.window_stride]
    val_insts = splits["val"][::train_cfg.window_stride]
    if not train_insts:
        raise ValueError("no training instances; dataset too short for windowing")

    noise_rng = seed_stream(train_cfg.seed, STREAM_NOISE)
    batch_seed_rng = seed_stream(train_cfg.seed, STREAM_BATCH)
    # fixed validation noise, indexed by origin so batching cannot reorder it
    val_noise = None
    if cfg.head == "variational":
        val_noise = noise_rng.standard_normal((len(dataset), cfg.latent_dim))

    state = AdamState(model.params)
    result = TrainResult(model=model)
    best_arrays = {k: v.copy() for k, v in model.params.arrays().items()}

    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        epoch_seed = int(batch_seed_rng.integers(2**63))
        total, count = 0.0, 0
        for batch_insts in make_batches(train_insts, train_cfg.batch_size, epoch_seed):
            loads, ext, targets = stack_batch(batch_insts, dataset, cfg.horizon)
            loss = batch_loss(model, loads, ext, targets, train_cfg.kl_weight,
                              rng=noise_rng)
            grads = ad.backward(loss, model.params)
            grads, _ = clip_gradients(grads, train_cfg.clip_norm)
            adam_step(model.params, grads, state, train_cfg.learning_rate)
            total += float(loss.data) * len(batch_insts)
            count += len(batch_insts)
        train_loss = total / count
        val_loss = _epoch_loss(model, val_insts, dataset, cfg,
                               train_cfg.kl_weight, val_noise)
        if val_loss is None:
            val_loss = train_loss
        if not np.isfinite(val_loss):
            raise TrainingDiverged(
                f"validation loss became non-finite at epoch {epoch} "
                f"(train loss {train_loss!r}); best checkpoint is from epoch "
                f"{result.best_epoch}", result.history)
        result.history.append((epoch, train_loss, val_loss))
        result.epoch_seconds.append(time.perf_counter() - t0)
        if val_loss < result.best_val:
            result.best_val = val_loss
            result.best_epoch = epoch
            best_arrays = {k: v.copy() for k, v in model.params.arrays().items()}

    result.final_arrays = {k: v.copy() for k, v in model.params.arrays().items()}
    for name, tensor in model.params.items():
        tensor.data[...] = best_arrays[name]
    return result


def history_csv(history):
    lines = ["epoch,train_loss,val_loss"]
    for epoch, train_loss, val_loss in history:
        lines.append(f"{epoch},{train_loss!r},{val_loss!r}")
    return "\n".join(lines) + "\n"
