#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import math
import sys
from dataclasses import dataclass


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
from scipy.special import expit

from src.helpers import DGLMError


#### GLOBALS #######################################################################################
SCHEDULE_KINDS = ["cosine", "scaled_cosine"]
DEFAULT_LAMBDA_MIN = -15.0
DEFAULT_LAMBDA_MAX = 15.0
DEFAULT_BINS = 64
DEFAULT_EMA_DECAY = 0.99
DEFAULT_FLOOR = 1e-3


#### CLASSES #######################################################################################
class ScheduleDomainError(DGLMError, ValueError):
    """
    Exception raised when a schedule is evaluated outside t in [0, 1] or built with bad bounds.
    """
    pass


@dataclass(frozen=True)
class Schedule(object):
    """
    Variance-preserving noise schedule. Maps diffusion time t in [0, 1] to (alpha, sigma, lambda)
    with alpha^2 + sigma^2 = 1 and lambda = ln(alpha^2 / sigma^2) clamped to
    [lambda_min, lambda_max].

    The scaled cosine schedule shifts the cosine log-SNR by -2 ln(shift) when shift > 0 (more
    noise for shift > 1) and by +2 ln|shift| when shift < 0.
    """
    kind: str = "cosine"
    shift: float = 1.0
    lambda_min: float = DEFAULT_LAMBDA_MIN
    lambda_max: float = DEFAULT_LAMBDA_MAX

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ScheduleDomainError("Unknown schedule kind '{}'.".format(self.kind))
        if not self.lambda_min < self.lambda_max:
            raise ScheduleDomainError("lambda_min={} must be below lambda_max={}.".format(
                self.lambda_min, self.lambda_max))
        if self.shift == 0:
            raise ScheduleDomainError("Schedule shift cannot be 0.")


@dataclass
class AdaptiveSamplerState(object):
    """
    Piecewise-constant importance sampler over log-SNR. Each of the B bins holds an EMA of the
    training loss observed in it; bins are drawn proportionally to that EMA (floored so no bin
    starves) and lambda is uniform within the bin.
    """
    bin_edges: np.ndarray
    ema_loss: np.ndarray
    ema_decay: float = DEFAULT_EMA_DECAY
    floor: float = DEFAULT_FLOOR

    @property
    def num_bins(self):
        return len(self.ema_loss)


#### FUNCTIONS #####################################################################################
def scheduleFromConfig(config, prefix="schedule"):
    """
    Build a Schedule from the '<prefix>.*' keys of a RunConfig. The clamp bounds always come
    from 'schedule.lambda_min' and 'schedule.lambda_max'.

    GIVEN:
      config (RunConfig) -- resolved configuration
      prefix (str) -- 'schedule' for diffusion, 'augment' for decoder noise augmentation

    RETURN:
      ____ (Schedule) -- the schedule
    """
    return Schedule(
        kind=config[prefix + ".kind"], shift=float(config[prefix + ".shift"]),
        lambda_min=float(config["schedule.lambda_min"]),
        lambda_max=float(config["schedule.lambda_max"])
    )


def _shiftOffset(schedule):
    """
    Additive log-SNR offset of the schedule (0 for the plain cosine schedule).
    """
    if schedule.kind == "cosine":
        return 0.0
    if schedule.shift > 0:
        return -2.0 * math.log(schedule.shift)
    return 2.0 * math.log(-schedule.shift)


def _checkTime(t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ScheduleDomainError("Diffusion time must lie in [0, 1], got {}.".format(t))
    return t_arr


def _unwrap(value, like):
    """
    Return a python float when the caller passed a scalar.
    """
    if np.ndim(like) == 0:
        return float(value)
    return value


def lambdaOf(schedule, t):
    """
    Log signal-to-noise ratio lambda_t = ln(alpha_t^2 / sigma_t^2), clamped.

    For the cosine base, alpha_t = cos(pi t / 2), so lambda_t = -2 ln tan(pi t / 2).

    GIVEN:
      schedule (Schedule) -- the schedule
      t (float|np.ndarray) -- diffusion time(s) in [0, 1]

    RETURN:
      lam (float|np.ndarray) -- log-SNR in [lambda_min, lambda_max]
    """
    t_arr = _checkTime(t)
    with np.errstate(divide="ignore"):
        lam = -2.0 * np.log(np.tan(0.5 * np.pi * t_arr))
    lam = lam + _shiftOffset(schedule)
    lam = np.clip(lam, schedule.lambda_min, schedule.lambda_max)
    return _unwrap(lam, t)


def alphaSigmaOfLambda(lam):
    """
    Variance-preserving (alpha, sigma) for a log-SNR: alpha^2 = logistic(lambda),
    sigma^2 = logistic(-lambda).

    GIVEN:
      lam (float|np.ndarray) -- log-SNR

    RETURN:
      alpha (float|np.ndarray) -- signal scale
      sigma (float|np.ndarray) -- noise scale
    """
    lam_arr = np.asarray(lam, dtype=np.float64)
    alpha = np.sqrt(expit(lam_arr))
    sigma = np.sqrt(expit(-lam_arr))
    return _unwrap(alpha, lam), _unwrap(sigma, lam)


def alphaSigma(schedule, t):
    """
    Signal and noise scales at time t.

    GIVEN:
      schedule (Schedule) -- the schedule
      t (float|np.ndarray) -- diffusion time(s) in [0, 1]

    RETURN:
      alpha (float|np.ndarray) -- signal scale
      sigma (float|np.ndarray) -- noise scale
    """
    return alphaSigmaOfLambda(lambdaOf(schedule, t))


def timeOfLambda(schedule, lam):
    """
    Inverse of lambdaOf on the unclamped range: t = (2 / pi) atan(exp(-lambda_base / 2)).
    """
    lam_arr = np.asarray(lam, dtype=np.float64)
    base = lam_arr - _shiftOffset(schedule)
    t = (2.0 / np.pi) * np.arctan(np.exp(-0.5 * base))
    return _unwrap(np.clip(t, 0.0, 1.0), lam)


def lambdaOfNoiseVar(schedule, noise_var):
    """
    Log-SNR at which the forward process has variance noise_var: sigma^2 = v, alpha^2 = 1 - v.
    v = 0 and v = 1 land on the clamp bounds.

    GIVEN:
      schedule (Schedule) -- supplies the clamp bounds
      noise_var (float) -- target sigma^2 in [0, 1]

    RETURN:
      lam (float) -- clamped log-SNR
    """
    if not 0.0 <= noise_var <= 1.0:
        raise ScheduleDomainError("Noise variance must lie in [0, 1], got {}.".format(noise_var))
    if noise_var == 0.0:
        return float(schedule.lambda_max)
    if noise_var == 1.0:
        return float(schedule.lambda_min)
    lam = math.log((1.0 - noise_var) / noise_var)
    return float(min(max(lam, schedule.lambda_min), schedule.lambda_max))


def newAdaptiveState(lambda_min=DEFAULT_LAMBDA_MIN, lambda_max=DEFAULT_LAMBDA_MAX,
                     bins=DEFAULT_BINS, decay=DEFAULT_EMA_DECAY, floor=DEFAULT_FLOOR):
    """
    Build an AdaptiveSamplerState with uniform EMA over equal-width bins.
    """
    if bins < 1:
        raise ScheduleDomainError("Adaptive sampler needs at least one bin.")
    if not 0.0 < decay < 1.0:
        raise ScheduleDomainError("EMA decay must lie in (0, 1), got {}.".format(decay))
    return AdaptiveSamplerState(
        bin_edges=np.linspace(lambda_min, lambda_max, bins + 1),
        ema_loss=np.ones(bins, dtype=np.float64),
        ema_decay=float(decay),
        floor=float(floor)
    )


def binProbabilities(state):
    """
    Probability of drawing each bin: normalized EMA, floored, renormalized. An all-zero EMA
    falls back to uniform.

    GIVEN:
      state (AdaptiveSamplerState) -- sampler state

    RETURN:
      probs (np.ndarray) -- probabilities summing to 1
    """
    total = float(np.sum(state.ema_loss))
    if total <= 0.0 or not np.isfinite(total):
        return np.full(state.num_bins, 1.0 / state.num_bins)
    probs = np.maximum(state.ema_loss / total, state.floor)
    return probs / np.sum(probs)


def adaptiveSample(state, rng, size=None):
    """
    Draw log-SNR values from the adaptive density and return their importance weights. The
    weight is (1 / range) / density, so E[weight * loss] equals the expected loss under uniform
    lambda on [lambda_min, lambda_max].

    GIVEN:
      state (AdaptiveSamplerState) -- sampler state
      rng (np.random.Generator) -- random stream
      size (int) -- number of draws, or None for a single scalar draw

    RETURN:
      lam (float|np.ndarray) -- sampled log-SNR values
      importance_weight (float|np.ndarray) -- matching importance weights
    """
    probs = binProbabilities(state)
    widths = np.diff(state.bin_edges)
    lam_range = state.bin_edges[-1] - state.bin_edges[0]

    n = 1 if size is None else int(size)
    bins = rng.choice(state.num_bins, size=n, p=probs)
    lam = state.bin_edges[bins] + rng.random(n) * widths[bins]
    importance_weight = widths[bins] / (probs[bins] * lam_range)

    if size is None:
        return float(lam[0]), float(importance_weight[0])
    return lam, importance_weight


def adaptiveUpdate(state, lam, observed_loss):
    """
    Fold observed losses into the EMA of the bins containing each lambda. Values outside the
    clamp range update the nearest edge bin.

    GIVEN:
      state (AdaptiveSamplerState) -- sampler state, updated in place
      lam (float|np.ndarray) -- log-SNR of each observation
      observed_loss (float|np.ndarray) -- nonnegative losses, same shape as lam

    RETURN:
      state (AdaptiveSamplerState) -- the updated state
    """
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    loss_arr = np.atleast_1d(np.asarray(observed_loss, dtype=np.float64))
    if np.any(loss_arr < 0.0) or np.any(~np.isfinite(loss_arr)):
        raise ScheduleDomainError("Observed losses must be finite and nonnegative.")

    bins = np.searchsorted(state.bin_edges, lam_arr, side="right") - 1
    bins = np.clip(bins, 0, state.num_bins - 1)
    # Sequential so repeated hits on one bin compound like separate steps
    for b, loss in zip(bins, loss_arr):
        state.ema_loss[b] = state.ema_decay * state.ema_loss[b] + (1.0 - state.ema_decay) * loss

    return state


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
