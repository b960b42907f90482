#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import sys
from dataclasses import dataclass
from typing import Any


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
import torch

from src.classifier import logProb, lossGradX
from src.denoiser import predictV
from src.diffusion import KindMismatchError, LatentState, Prediction, SingularityError, \
    convert, posteriorStepParams
from src.gmm import gmmScore
from src.helpers import DimensionMismatchError, checkDim
from src.schedules import alphaSigmaOfLambda, lambdaOf


#### GLOBALS #######################################################################################
MC_FORMS = ["paper_literal", "likelihood_mean"]
JACOBIAN_MODES = ["full", "scaled_identity"]


#### CLASSES #######################################################################################
@dataclass(frozen=True)
class GuidanceConfig(object):
    """
    Sampler and guidance settings: CFG weight w, classifier guidance scale s, Monte-Carlo sample
    count n, number of DDPM steps, the Monte-Carlo aggregate form, and how the clean-space
    gradient is pulled back to z.
    """
    cfg_weight: float = 1.0
    guidance_scale: float = 0.0
    mc_samples: int = 32
    steps: int = 50
    mc_form: str = "paper_literal"
    jacobian: str = "full"
    t_min: float = 1e-3
    v_interp: float = 0.2

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1, got {}.".format(self.mc_samples))
        if self.steps < 1:
            raise ValueError("steps must be at least 1, got {}.".format(self.steps))
        if self.cfg_weight < 0 or self.guidance_scale < 0:
            raise ValueError("cfg_weight and guidance_scale must be nonnegative.")
        if self.mc_form not in MC_FORMS:
            raise ValueError("Unknown mc_form '{}'.".format(self.mc_form))
        if self.jacobian not in JACOBIAN_MODES:
            raise ValueError("Unknown jacobian mode '{}'.".format(self.jacobian))
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1), got {}.".format(self.t_min))


@dataclass
class GuidanceTerm(object):
    """
    One classifier steering toward one target class. The per-draw guidance loss is the
    weighted sum of every term's cross-entropy.
    """
    classifier: Any
    target: Any
    weight: float = 1.0


class LearnedDenoiser(object):
    """
    Adapts a trained Denoiser to the sampler: v-predictions, conditional or not.
    """
    def __init__(self, model):
        self.model = model
        self.dim = model.dim


    def predict(self, latent, prefix):
        return predictV(self.model, latent, prefix)


class OracleDenoiser(object):
    """
    Adapts the exact mixture score to the sampler. It is unconditional: the prefix is ignored.
    """
    def __init__(self, gmm):
        self.gmm = gmm
        self.dim = gmm.dim


    def predict(self, latent, prefix):
        alpha, sigma = alphaSigmaOfLambda(float(latent.lam))
        return Prediction(kind="score", value=gmmScore(self.gmm, latent.z, alpha, sigma))


#### FUNCTIONS #####################################################################################
def guidanceFromConfig(config, **overrides):
    """
    Build a GuidanceConfig from the guidance.* and sampler.* keys, with keyword overrides.
    """
    values = dict(
        cfg_weight=config["guidance.cfg_w"], guidance_scale=config["guidance.s"],
        mc_samples=config["guidance.mc_n"], steps=config["sampler.steps"],
        mc_form=config["guidance.mc_form"], jacobian=config["guidance.jacobian"],
        t_min=config["sampler.t_min"], v_interp=config["sampler.v_interp"],
    )
    values.update({k: v for k, v in overrides.items() if v is not None})
    return GuidanceConfig(**values)


def cfgBlend(cond, uncond, w):
    """
    Classifier-free guidance blend w * cond + (1 - w) * uncond.

    GIVEN:
      cond (Prediction) -- prefix-conditioned prediction
      uncond (Prediction) -- unconditional prediction of the same kind
      w (float) -- guidance weight; 1 is purely conditional

    RETURN:
      ____ (Prediction) -- blended prediction of the same kind
    """
    if cond.kind != uncond.kind:
        raise KindMismatchError("Cannot blend '{}' with '{}'.".format(cond.kind, uncond.kind))
    if cond.value.shape != uncond.value.shape:
        raise DimensionMismatchError("Cannot blend shapes {} and {}.".format(
            tuple(cond.value.shape), tuple(uncond.value.shape)))
    return Prediction(kind=cond.kind, value=w * cond.value + (1.0 - w) * uncond.value)


def _blendedPrediction(denoiser, latent, prefix, w):
    if prefix is None:
        return denoiser.predict(latent, None)
    if w == 1.0:
        return denoiser.predict(latent, prefix)
    return cfgBlend(denoiser.predict(latent, prefix), denoiser.predict(latent, None), w)


def dpsEstimate(denoiser, latent, prefix, cfg_weight=1.0):
    """
    MMSE estimate x_hat of the clean embedding: alpha z - sigma v_hat for a v-predicting
    denoiser, Tweedie (z + sigma^2 score) / alpha for a score oracle. CFG blending happens
    before the conversion.

    GIVEN:
      denoiser (LearnedDenoiser|OracleDenoiser) -- the denoiser
      latent (LatentState) -- z_t with scalar t
      prefix (torch.Tensor) -- prefix embedding or None
      cfg_weight (float) -- CFG weight w

    RETURN:
      ____ (torch.Tensor) -- x_hat, same shape as latent.z
    """
    return convert(_blendedPrediction(denoiser, latent, prefix, cfg_weight), latent, "x0").value


def _termLosses(terms, xs):
    """
    Weighted summed cross-entropy of every draw and its gradient with respect to the draw.
    """
    loss = torch.zeros(xs.shape[:-1], dtype=xs.dtype)
    grad = torch.zeros_like(xs)
    for term in terms:
        checkDim("classifier input", xs, term.classifier.dim)
        loss = loss - term.weight * logProb(term.classifier, xs, term.target).to(xs.dtype)
        grad = grad + term.weight * lossGradX(term.classifier, xs, term.target).to(xs.dtype)
    return loss, grad


def _drawsAround(x_hat, alpha, sigma, cfg, generator, xi):
    """
    Perturbed estimates x_hat + (sigma / alpha) xi as an (n, *x_hat.shape) stack. A single
    draw is x_hat itself.
    """
    if cfg.mc_samples == 1:
        return x_hat[None]
    if xi is None:
        xi = torch.randn((cfg.mc_samples,) + tuple(x_hat.shape), generator=generator,
                         dtype=x_hat.dtype)
    return x_hat[None] + (sigma / alpha) * xi


def _checkGuidable(latent):
    alpha, sigma = alphaSigmaOfLambda(float(latent.lam))
    if alpha <= 0.0 or sigma <= 0.0:
        raise SingularityError("Guidance needs alpha > 0 and sigma > 0.")
    return alpha, sigma


def mcGuidanceGradient(denoiser, terms, latent, prefix, cfg, generator=None, xi=None):
    """
    Monte-Carlo smoothed DPS guidance direction in z-space. Draws n estimates
    x_hat_i = x_hat + (sigma / alpha) xi_i around the MMSE estimate, aggregates the classifier
    loss gradients at the draws,
        paper_literal:   g_x = -sum_i softmax(l)_i grad l_i    (= -grad log mean exp(l))
        likelihood_mean: g_x = -sum_i softmax(-l)_i grad l_i   (= grad log mean exp(-l))
    and pulls g_x back to z through x_hat(z) (full) or as alpha * g_x (scaled_identity).

    GIVEN:
      denoiser (LearnedDenoiser|OracleDenoiser) -- the denoiser
      terms (list) -- GuidanceTerm objects whose losses are summed
      latent (LatentState) -- z_t with scalar t, (d,) or (B, d)
      prefix (torch.Tensor) -- prefix embedding or None
      cfg (GuidanceConfig) -- guidance settings
      generator (torch.Generator) -- random stream for the draws
      xi (torch.Tensor) -- optional fixed standard-normal draws, (n, *z.shape)

    RETURN:
      ____ (torch.Tensor) -- g_z, same shape as latent.z
    """
    alpha, sigma = _checkGuidable(latent)

    with torch.enable_grad():
        z = latent.z.detach().requires_grad_(cfg.jacobian == "full")
        x_hat = dpsEstimate(denoiser, LatentState(z, latent.t, latent.lam), prefix,
                            cfg.cfg_weight)

        xs = _drawsAround(x_hat.detach(), alpha, sigma, cfg, generator, xi)
        loss, grad = _termLosses(terms, xs)
        sign = 1.0 if cfg.mc_form == "paper_literal" else -1.0
        weights = torch.softmax(sign * loss, dim=0)
        g_x = -torch.sum(weights[..., None] * grad, dim=0)

        if cfg.jacobian == "scaled_identity":
            return alpha * g_x
        (g_z,) = torch.autograd.grad(x_hat, z, grad_outputs=g_x)
    return g_z


def guidanceObjective(denoiser, terms, latent, prefix, cfg, xi=None):
    """
    The scalar whose z-gradient mcGuidanceGradient returns (with the full Jacobian), for fixed
    draws xi: -log mean exp(l) for paper_literal, log mean exp(-l) for likelihood_mean.
    """
    alpha, sigma = _checkGuidable(latent)
    x_hat = dpsEstimate(denoiser, latent, prefix, cfg.cfg_weight)
    xs = _drawsAround(x_hat, alpha, sigma, cfg, None, xi)
    loss, _ = _termLosses(terms, xs)
    log_n = float(np.log(xs.shape[0]))
    if cfg.mc_form == "paper_literal":
        return -(torch.logsumexp(loss, dim=0) - log_n).sum()
    return (torch.logsumexp(-loss, dim=0) - log_n).sum()


def _guidanceActive(terms, cfg):
    return cfg.guidance_scale != 0.0 and any(term.weight != 0.0 for term in (terms or list()))


def sample(denoiser, prefix, terms, cfg, generator, schedule, num=None):
    """
    DDPM ancestral sampling from t = 1 to t_min over 'steps' uniform time points. Each step
    blends conditional and unconditional predictions, converts to x_hat, shifts x_hat by
    (sigma^2 / alpha) s g_z when guidance is active, then draws z_s from the posterior step
    (the final step returns x_hat without noise).

    GIVEN:
      denoiser (LearnedDenoiser|OracleDenoiser) -- the denoiser
      prefix (torch.Tensor) -- (d,) prefix embedding or None
      terms (list) -- GuidanceTerm objects, or None/empty for no classifier guidance
      cfg (GuidanceConfig) -- sampler and guidance settings
      generator (torch.Generator) -- the run's random stream
      schedule (Schedule) -- noise schedule
      num (int) -- number of samples, or None for a single (d,) vector

    RETURN:
      ____ (torch.Tensor) -- clean embedding(s), (d,) or (num, d)
    """
    shape = (denoiser.dim,) if num is None else (int(num), denoiser.dim)
    if prefix is not None:
        prefix = torch.as_tensor(prefix, dtype=torch.float64)
        checkDim("prefix", prefix, denoiser.dim)
    guided = _guidanceActive(terms, cfg)

    ts = np.linspace(1.0, cfg.t_min, cfg.steps) if cfg.steps > 1 else np.array([1.0])
    z = torch.randn(shape, generator=generator, dtype=torch.float64)
    x_hat = z
    for i, t in enumerate(ts):
        latent = LatentState(z=z, t=float(t), lam=lambdaOf(schedule, float(t)))
        with torch.no_grad():
            x_hat = dpsEstimate(denoiser, latent, prefix, cfg.cfg_weight)

        if guided:
            alpha, sigma = alphaSigmaOfLambda(float(latent.lam))
            g_z = mcGuidanceGradient(denoiser, terms, latent, prefix, cfg, generator)
            x_hat = x_hat + (sigma ** 2 / alpha) * cfg.guidance_scale * g_z.detach()

        if i == len(ts) - 1:
            break
        mean, step_sigma = posteriorStepParams(latent, Prediction(kind="x0", value=x_hat),
                                               float(ts[i + 1]), cfg.v_interp, schedule)
        noise = torch.randn(shape, generator=generator, dtype=torch.float64)
        z = mean + step_sigma * noise

    return x_hat


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
