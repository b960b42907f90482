#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import math
import sys
from dataclasses import dataclass
from typing import Any


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
import torch

from src.helpers import DGLMError, DimensionMismatchError
from src.schedules import alphaSigma, alphaSigmaOfLambda, lambdaOf, timeOfLambda


#### GLOBALS #######################################################################################
PREDICTION_KINDS = ["eps", "x0", "v", "score"]
WEIGHTING_KINDS = ["lognormal", "hybrid"]
DEFAULT_WEIGHT_SCALE = 2.4


#### CLASSES #######################################################################################
class SingularityError(DGLMError, ValueError):
    """
    Exception raised when a conversion divides by alpha = 0 or sigma = 0.
    """
    pass


class KindMismatchError(DGLMError, ValueError):
    """
    Exception raised when a Prediction has the wrong kind for an operation.
    """
    pass


class StepOrderError(DGLMError, ValueError):
    """
    Exception raised when a sampler step does not move strictly backwards in time.
    """
    pass


@dataclass
class LatentState(object):
    """
    A noisy embedding z_t together with its diffusion time and log-SNR. t and lam are either
    scalars shared by every row of z or 1-D arrays with one entry per row.
    """
    z: torch.Tensor
    t: Any
    lam: Any


@dataclass
class Prediction(object):
    """
    A network or oracle output, interpreted according to kind (eps, x0, v or score).
    """
    kind: str
    value: torch.Tensor

    def __post_init__(self):
        if self.kind not in PREDICTION_KINDS:
            raise KindMismatchError("Unknown prediction kind '{}'.".format(self.kind))


@dataclass(frozen=True)
class WeightingFn(object):
    """
    DSM loss weighting over log-SNR, normalized so w(0) = 1.
    """
    kind: str = "hybrid"
    scale: float = DEFAULT_WEIGHT_SCALE

    def __post_init__(self):
        if self.kind not in WEIGHTING_KINDS:
            raise KindMismatchError("Unknown weighting kind '{}'.".format(self.kind))


#### FUNCTIONS #####################################################################################
def _coef(value, like):
    """
    Turn a scalar or per-row coefficient into a tensor that broadcasts against like, which is
    either a (d,) vector or a (B, d) batch.
    """
    if torch.is_tensor(value):
        coef = value.to(dtype=like.dtype)
    else:
        coef = torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=like.dtype)
    if coef.dim() == 1 and like.dim() >= 2:
        coef = coef.reshape(-1, *([1] * (like.dim() - 1)))
    return coef


def latentAt(schedule, z, t):
    """
    Wrap an existing noisy tensor as a LatentState at time t.
    """
    return LatentState(z=z, t=t, lam=lambdaOf(schedule, t))


def forwardDiffuse(x, t, eps, schedule):
    """
    Forward process z_t = alpha_t x + sigma_t eps.

    GIVEN:
      x (torch.Tensor) -- clean sample(s), (d,) or (B, d)
      t (float|np.ndarray) -- diffusion time, scalar or one per row
      eps (torch.Tensor) -- standard normal draw, same shape as x
      schedule (Schedule) -- noise schedule

    RETURN:
      ____ (LatentState) -- the noisy latent
    """
    return forwardDiffuseLambda(x, lambdaOf(schedule, t), eps, t=t)


def forwardDiffuseLambda(x, lam, eps, t=None, schedule=None):
    """
    Forward process at a given log-SNR, used by training where lambda is sampled directly.
    """
    if x.shape != eps.shape:
        raise DimensionMismatchError("x has shape {} but eps has shape {}.".format(
            tuple(x.shape), tuple(eps.shape)))
    alpha, sigma = alphaSigmaOfLambda(lam)
    z = _coef(alpha, x) * x + _coef(sigma, x) * eps
    if t is None and schedule is not None:
        t = timeOfLambda(schedule, lam)
    return LatentState(z=z, t=t, lam=lam)


def _cleanAndNoise(pred, alpha, sigma, z):
    """
    Recover the (x, eps) pair implied by a prediction at the given noise level.
    """
    if pred.kind == "eps":
        if torch.any(alpha == 0):
            raise SingularityError("Cannot recover x from eps at alpha = 0.")
        eps = pred.value
        x = (z - sigma * eps) / alpha
    elif pred.kind == "x0":
        if torch.any(sigma == 0):
            raise SingularityError("Cannot recover eps from x at sigma = 0.")
        x = pred.value
        eps = (z - alpha * x) / sigma
    elif pred.kind == "v":
        x = alpha * z - sigma * pred.value
        eps = alpha * pred.value + sigma * z
    else:
        if torch.any(alpha == 0):
            raise SingularityError("Cannot recover x from the score at alpha = 0.")
        eps = -sigma * pred.value
        x = (z - sigma * eps) / alpha
    return x, eps


def convert(pred, z, target_kind):
    """
    Convert a prediction between the eps, x0, v and score parameterizations using
        v = alpha eps - sigma x,   eps = alpha v + sigma z,   x = alpha z - sigma v,
        score = -eps / sigma = -z - (alpha / sigma) v.

    GIVEN:
      pred (Prediction) -- prediction to convert
      z (LatentState) -- the latent it was made for
      target_kind (str) -- one of PREDICTION_KINDS

    RETURN:
      ____ (Prediction) -- the converted prediction
    """
    if target_kind not in PREDICTION_KINDS:
        raise KindMismatchError("Unknown prediction kind '{}'.".format(target_kind))
    if pred.value.shape != z.z.shape:
        raise DimensionMismatchError("Prediction has shape {} but latent has shape {}.".format(
            tuple(pred.value.shape), tuple(z.z.shape)))
    if pred.kind == target_kind:
        return Prediction(kind=target_kind, value=pred.value)

    alpha, sigma = alphaSigmaOfLambda(z.lam)
    alpha = _coef(alpha, z.z)
    sigma = _coef(sigma, z.z)

    # Direct forms for the v <-> x0 pair, which the sampler uses every step
    if pred.kind == "v" and target_kind == "x0":
        return Prediction(kind="x0", value=alpha * z.z - sigma * pred.value)

    x, eps = _cleanAndNoise(pred, alpha, sigma, z.z)
    if target_kind == "eps":
        value = eps
    elif target_kind == "x0":
        value = x
    elif target_kind == "v":
        value = alpha * eps - sigma * x
    else:
        if torch.any(sigma == 0):
            raise SingularityError("The score is singular at sigma = 0.")
        value = -eps / sigma

    return Prediction(kind=target_kind, value=value)


def weight(wfn, lam):
    """
    Loss weight at log-SNR lam. Both forms equal 1 at lambda = 0.
      lognormal: exp(-lambda^2 / (2 s^2))
      hybrid:    1 / (1 + (lambda / s)^2) for lambda < 0, the lognormal form for lambda >= 0

    GIVEN:
      wfn (WeightingFn) -- weighting function
      lam (float|np.ndarray) -- log-SNR

    RETURN:
      ____ (float|np.ndarray) -- positive weights
    """
    lam_arr = np.asarray(lam, dtype=np.float64)
    gaussian = np.exp(-lam_arr ** 2 / (2.0 * wfn.scale ** 2))
    if wfn.kind == "lognormal":
        w = gaussian
    else:
        cauchy = 1.0 / (1.0 + (lam_arr / wfn.scale) ** 2)
        w = np.where(lam_arr < 0.0, cauchy, gaussian)
    if np.ndim(lam) == 0:
        return float(w)
    return w


def dsmVLoss(v_hat, x, eps, z, wfn):
    """
    Weighted v-prediction denoising score matching loss w(lambda) * ||v_hat - v||^2 with
    v = alpha eps - sigma x.

    GIVEN:
      v_hat (Prediction) -- predicted velocity, kind 'v'
      x (torch.Tensor) -- clean sample(s)
      eps (torch.Tensor) -- noise draw(s) used to form z
      z (LatentState) -- the noisy latent
      wfn (WeightingFn) -- loss weighting

    RETURN:
      loss (torch.Tensor) -- scalar for a single vector, (B,) for a batch
    """
    if v_hat.kind != "v":
        raise KindMismatchError("dsmVLoss expects a 'v' prediction, got '{}'.".format(v_hat.kind))
    if not (v_hat.value.shape == x.shape == eps.shape):
        raise DimensionMismatchError("v_hat, x and eps must share a shape.")

    alpha, sigma = alphaSigmaOfLambda(z.lam)
    v_true = _coef(alpha, x) * eps - _coef(sigma, x) * x
    w = torch.as_tensor(np.asarray(weight(wfn, z.lam), dtype=np.float64), dtype=x.dtype)
    return w * torch.sum((v_hat.value - v_true) ** 2, dim=-1)


def posteriorStepParams(z_t, x_hat, t_next, v_interp, schedule):
    """
    Mean and standard deviation of the DDPM ancestral step q(z_s | z_t, x_hat) with s = t_next.
    The step variance interpolates in log space between the posterior variance (v = 0) and the
    forward transition variance (v = 1).

    GIVEN:
      z_t (LatentState) -- current latent at scalar time t
      x_hat (Prediction) -- clean estimate, kind 'x0'
      t_next (float) -- next time, strictly below t
      v_interp (float) -- log-variance interpolation weight in [0, 1]
      schedule (Schedule) -- noise schedule

    RETURN:
      mean (torch.Tensor) -- step mean, same shape as z_t.z
      step_sigma (float) -- step standard deviation
    """
    if x_hat.kind != "x0":
        raise KindMismatchError("posteriorStepParams expects an 'x0' prediction.")
    if not float(t_next) < float(z_t.t):
        raise StepOrderError("t_next={} must be below t={}.".format(t_next, z_t.t))

    alpha_t, sigma_t = alphaSigmaOfLambda(float(z_t.lam))
    alpha_s, sigma_s = alphaSigma(schedule, float(t_next))
    if sigma_t == 0.0:
        raise SingularityError("Cannot take a posterior step from sigma_t = 0.")

    alpha_ts = alpha_t / alpha_s
    var_ts = max(sigma_t ** 2 - alpha_ts ** 2 * sigma_s ** 2, 0.0)
    mean = (alpha_ts * sigma_s ** 2 / sigma_t ** 2) * z_t.z \
        + (alpha_s * var_ts / sigma_t ** 2) * x_hat.value

    var_max = var_ts
    var_min = var_ts * sigma_s ** 2 / sigma_t ** 2
    if var_min <= 0.0 or var_max <= 0.0:
        step_var = 0.0
    else:
        step_var = math.exp(v_interp * math.log(var_max) + (1.0 - v_interp) * math.log(var_min))

    return mean, math.sqrt(step_var)


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
