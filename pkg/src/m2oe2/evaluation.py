"""Deterministic and probabilistic scoring with model comparison reports.

CRPS comes in two independent routes: the Gaussian closed form used for
reporting, and trapezoidal integration of the defining integral, which
serves as the oracle the closed form is checked against.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr  # standard normal CDF

from . import data as datamod
from .config import seed_stream, STREAM_EVAL

INV_SQRT_PI = 1.0 / np.sqrt(np.pi)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _phi(z):
    return INV_SQRT_2PI * np.exp(-0.5 * z * z)


def crps_gaussian(mean, std, x):
    """Closed-form CRPS of a Gaussian forecast at observation x.

    std * [ z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi) ], z = (x - mean)/std.
    Nonnegative by construction; vectorizes elementwise.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("crps_gaussian: std must be strictly positive")
    z = (x - mean) / std
    return std * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * _phi(z) - INV_SQRT_PI)


def crps_point(mean, x):
    """Degenerate (point-mass) forecast limit of the CRPS: absolute error."""
    return np.abs(np.asarray(mean, dtype=np.float64) - np.asarray(x, dtype=np.float64))


def crps_numeric(cdf, x, lo, hi, step):
    """Trapezoidal integration of (F(z) - 1{z >= x})^2 over [lo, hi].

    The grid is split at the observation so the integrand's jump never
    lands inside a trapezoid.  ``cdf`` must be nondecreasing on the grid.
    """
    x = float(x)
    if not lo < hi:
        raise ValueError(f"crps_numeric: empty grid [{lo}, {hi}]")
    lo, hi = float(lo), float(hi)

    def _piece(a, b, indicator):
        if b <= a:
            return 0.0
        n = max(int(np.ceil((b - a) / step)), 2)
        grid = np.linspace(a, b, n + 1)
        f = np.asarray(cdf(grid), dtype=np.float64)
        if np.any(np.diff(f) < -1e-9):
            raise ValueError("crps_numeric: cdf samples are not nondecreasing")
        integrand = (f - indicator) ** 2
        return float(np.trapezoid(integrand, grid))

    # the left piece ends at the left limit of x: a right-continuous cdf
    # may jump exactly there, and that jump belongs to the right piece
    left = _piece(lo, min(np.nextafter(x, -np.inf), hi), 0.0)
    right = _piece(max(x, lo), hi, 1.0)
    return left + right


def empirical_cdf(samples):
    """Right-continuous step CDF of a finite sample set."""
    sorted_samples = np.sort(np.asarray(samples, dtype=np.float64))
    n = sorted_samples.size

    def cdf(z):
        return np.searchsorted(sorted_samples, np.asarray(z), side="right") / n

    return cdf


def mse_metric(means, targets):
    """Mean squared error of predictive means (spec'd in normalized units)."""
    means = np.asarray(means, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if means.shape != targets.shape:
        raise ValueError(f"mse_metric: shapes differ {means.shape} vs {targets.shape}")
    return float(np.mean((means - targets) ** 2))


# ---------------------------------------------------------------------------
# model evaluation over a test split


@dataclass
class EvalReport:
    model_name: str
    n_instances: int
    mse: float                   # normalized units
    mse_physical: float
    crps: float                  # normalized units
    crps_physical: float
    per_step_mse: list = field(default_factory=list)
    per_step_crps: list = field(default_factory=list)
    fingerprint: str = ""

    def row(self):
        steps = ",".join(
            f"{v!r}" for pair in zip(self.per_step_mse, self.per_step_crps) for v in pair)
        return (f"{self.model_name},{self.n_instances},{self.mse!r},"
                f"{self.mse_physical!r},{self.crps!r},{self.crps_physical!r},"
                f"{self.fingerprint}" + ("," + steps if steps else ""))


def report_csv(reports):
    horizon = len(reports[0].per_step_mse) if reports else 0
    steps = "".join(f",step{k+1}_mse,step{k+1}_crps" for k in range(horizon))
    header = "model,instances,mse,mse_physical,crps,crps_physical,fingerprint" + steps
    return "\n".join([header] + [r.row() for r in reports]) + "\n"


@dataclass
class InstanceForecasts:
    """Aligned prediction arrays for one model over a set of instances."""

    means: np.ndarray    # (n, horizon, n_series)
    stds: np.ndarray     # (n, horizon, n_series); zeros mean a point forecast
    targets: np.ndarray  # (n, horizon, n_series)
    origins: list


def predict_instances(model, dataset, instances, n_samples=None, seed=0):
    """Forecast every instance: one context pass per equal-length group,
    then per-instance Monte Carlo draws.

    The sampling stream is assigned by instance position, so batching can
    never reorder any draw; the result is deterministic given the seed.
    """
    import m2oe2.gru as gru_mod
    from . import autodiff as ad

    cfg = model.config
    horizon = cfg.horizon
    streams = np.random.SeedSequence((int(seed), STREAM_EVAL)).spawn(len(instances))
    index_of = {id(inst): k for k, inst in enumerate(instances)}
    means = np.empty((len(instances), horizon, cfg.n_series))
    stds = np.empty_like(means)
    targets = np.empty_like(means)
    shape = (horizon, cfg.n_series)
    for batch_insts in datamod.batch(instances, 256, seed=0):
        loads, ext, _ = datamod.stack_batch(batch_insts, dataset, horizon)
        with ad.no_grad():
            state = model.forward_context(loads, ext)
        for pos, inst in enumerate(batch_insts):
            k = index_of[id(inst)]
            targets[k] = inst.target(dataset, horizon)
            if cfg.head == "variational":
                rng = np.random.default_rng(streams[k])
                dist = gru_mod.mc_forecast(state.x_last.data[pos], state.top.data[pos],
                                           model.params, cfg, n_samples=n_samples,
                                           rng=rng)
                means[k], stds[k] = dist.mean, dist.std
            elif cfg.head == "gaussian":
                with ad.no_grad():
                    m, lv = gru_mod.gaussian_head(state.top, model.params)
                means[k] = m.data[pos].reshape(shape)
                stds[k] = np.exp(0.5 * np.clip(lv.data[pos], -30, 30)).reshape(shape)
            else:
                with ad.no_grad():
                    point = gru_mod.deterministic_head(state.top, model.params)
                means[k] = point.data[pos].reshape(shape)
                stds[k] = 0.0
    return InstanceForecasts(means, stds, targets, [i.origin for i in instances])


def persistence_forecasts(dataset, instances, horizon):
    """Repeat the last observed context value across the horizon."""
    n = len(instances)
    means = np.empty((n, horizon, dataset.n_series))
    targets = np.empty_like(means)
    for k, inst in enumerate(instances):
        last = dataset.loads[inst.origin - 1]
        means[k] = np.broadcast_to(last, (horizon, dataset.n_series))
        targets[k] = inst.target(dataset, horizon)
    return InstanceForecasts(means, np.zeros_like(means), targets,
                             [i.origin for i in instances])


def score_forecasts(name, forecasts, stats, fingerprint=""):
    """MSE and mean CRPS in normalized and physical units, per-step too."""
    means, stds, targets = forecasts.means, forecasts.stds, forecasts.targets
    err2 = (means - targets) ** 2
    crps = np.where(stds > 0,
                    crps_gaussian(means, np.where(stds > 0, stds, 1.0), targets),
                    crps_point(means, targets))
    load_scales = np.array([st.scale for st in stats.loads]) if stats is not None \
        else np.ones(means.shape[-1])
    err2_phys = err2 * load_scales ** 2  # z-score inversion: shift cancels
    crps_phys = crps * load_scales       # CRPS is positively homogeneous
    return EvalReport(
        model_name=name, n_instances=means.shape[0],
        mse=float(err2.mean()), mse_physical=float(err2_phys.mean()),
        crps=float(crps.mean()), crps_physical=float(crps_phys.mean()),
        per_step_mse=[float(v) for v in err2.mean(axis=(0, 2))],
        per_step_crps=[float(v) for v in crps.mean(axis=(0, 2))],
        fingerprint=fingerprint)


def evaluate(model, dataset, stats, instances, n_samples=None, seed=0,
             name="m2oe2"):
    """Score one trained model on a window set.

    Rejects evaluation when the dataset's normalization fingerprint does
    not match the one recorded at training time (guards against scoring
    with leaked or mismatched statistics).
    """
    if not instances:
        raise ValueError("evaluate: no instances in the requested split")
    fp = stats.fingerprint()
    if model.stats_fingerprint is not None and model.stats_fingerprint != fp:
        raise ValueError(
            f"evaluate: normalization stats fingerprint {fp} does not match "
            f"the model's training fingerprint {model.stats_fingerprint}")
    forecasts = predict_instances(model, dataset, instances,
                                  n_samples=n_samples, seed=seed)
    return score_forecasts(name, forecasts, stats, fingerprint=fp), forecasts


def plot_data_csv(dataset, stats, forecasts, horizon):
    """Per-timestamp truth, mean, and a mean +/- 2 std band (physical units)."""
    lines = ["timestamp,step,truth,mean,lower,upper"]
    for k, origin in enumerate(forecasts.origins):
        for step in range(horizon):
            mean_n = forecasts.means[k, step]
            std_n = forecasts.stds[k, step]
            truth_n = forecasts.targets[k, step]
            mean_p = stats.invert_loads(mean_n)
            truth_p = stats.invert_loads(truth_n)
            scales = np.array([st.scale for st in stats.loads])
            lo = mean_p - 2.0 * std_n * scales
            hi = mean_p + 2.0 * std_n * scales
            stamp = dataset.timestamps[origin + step]
            for series in range(dataset.n_series):
                lines.append(f"{stamp},{step + 1},{float(truth_p[series])!r},"
                             f"{float(mean_p[series])!r},{float(lo[series])!r},"
                             f"{float(hi[series])!r}")
    return "\n".join(lines) + "\n"
