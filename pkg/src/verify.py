#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import os
import sys
from collections import namedtuple


#### PACKAGE IMPORTS ###############################################################################
import torch

from src.gmm import GMMSpecError, classWeights, gmmBayesClassifier, gmmClassPosterior, \
    gmmLogDensity, gmmResponsibilities, gmmSample, gmmScore, loadGMMSpec
from src.helpers import deriveSeed, torchGenerator
from src.sampler import GuidanceTerm, OracleDenoiser, guidanceFromConfig, sample
from src.schedules import alphaSigma, scheduleFromConfig


#### GLOBALS #######################################################################################
SCORE_TOLERANCE = 1e-5
OCCUPANCY_TV = 0.05
MEAN_BIAS = 0.05
VARIANCE_TOLERANCE = 0.10
GUIDED_TV = 0.07
SCORE_POINTS = 64
FD_STEP = 1e-5
CONDITIONAL_DRAWS = 100000

CheckResult = namedtuple("CheckResult", ["name", "passed", "value", "limit"])


#### FUNCTIONS #####################################################################################
def totalVariation(p, q):
    """
    Total-variation distance 0.5 * sum |p - q| between two probability vectors.
    """
    return 0.5 * float(torch.sum(torch.abs(torch.as_tensor(p) - torch.as_tensor(q))))


def checkScore(gmm, schedule, generator, points=SCORE_POINTS):
    """
    Largest relative error between gmmScore and a central finite difference of gmmLogDensity
    at random points and diffusion times.
    """
    worst = 0.0
    for _ in range(points):
        t = 0.01 + 0.98 * float(torch.rand((), generator=generator, dtype=torch.float64))
        alpha, sigma = alphaSigma(schedule, t)
        z = 2.0 * torch.randn(gmm.dim, generator=generator, dtype=torch.float64)
        exact = gmmScore(gmm, z, alpha, sigma)
        fd = torch.zeros(gmm.dim, dtype=torch.float64)
        for i in range(gmm.dim):
            step = torch.zeros(gmm.dim, dtype=torch.float64)
            step[i] = FD_STEP
            fd[i] = (gmmLogDensity(gmm, z + step, alpha, sigma) -
                     gmmLogDensity(gmm, z - step, alpha, sigma)) / (2.0 * FD_STEP)
        scale = max(float(torch.linalg.norm(exact)), 1.0)
        worst = max(worst, float(torch.linalg.norm(fd - exact)) / scale)
    return worst


def _mixtureMoments(gmm):
    mean = torch.sum(gmm.weights[:, None] * gmm.means, dim=0)
    second = torch.sum(gmm.weights[:, None] * (gmm.diag_vars + gmm.means ** 2), dim=0)
    return mean, second - mean ** 2


def checkUnconditional(gmm, config, samples, seed):
    """
    Sample the mixture through the exact-score DDPM sampler and compare component occupancy,
    per-dimension means and variances with the truth. Steps use the verify.v_interp variance,
    not sampler.v_interp.

    RETURN:
      ____ (list) -- CheckResult for occupancy, mean bias and variance
    """
    schedule = scheduleFromConfig(config)
    cfg = guidanceFromConfig(config, guidance_scale=0.0, cfg_weight=1.0,
                             v_interp=config["verify.v_interp"])
    x = sample(OracleDenoiser(gmm), None, None, cfg, torchGenerator(seed), schedule, num=samples)

    occupancy = torch.mean(gmmResponsibilities(gmm, x), dim=0)
    mean, var = _mixtureMoments(gmm)
    bias = float(torch.max(torch.abs(torch.mean(x, dim=0) - mean)))
    var_error = float(torch.max(torch.abs(torch.var(x, dim=0) / var - 1.0)))
    tv = totalVariation(occupancy, gmm.weights)
    return [
        CheckResult("occupancy_tv", tv < OCCUPANCY_TV, tv, OCCUPANCY_TV),
        CheckResult("mean_bias", bias < MEAN_BIAS, bias, MEAN_BIAS),
        CheckResult("variance_rel_error", var_error < VARIANCE_TOLERANCE, var_error,
                    VARIANCE_TOLERANCE),
    ]


def conditionalClassWeights(gmm, target_index, generator, draws=CONDITIONAL_DRAWS):
    """
    Class weights of p(x | y) proportional to p(x) p(y | x), estimated numerically:
    w_c ~ pi_c * E_{x ~ class c}[p(y | x)].
    """
    x, labels = gmmSample(gmm, draws, generator)
    likelihood = gmmClassPosterior(gmm, x)[:, target_index]
    prior = classWeights(gmm)
    weights = torch.stack([
        prior[c] * torch.mean(likelihood[labels == cls]) if torch.any(labels == cls)
        else torch.zeros((), dtype=torch.float64)
        for c, cls in enumerate(gmm.classes)
    ])
    return weights / torch.sum(weights)


def checkGuided(gmm, config, samples, seed):
    """
    Guided sampling with the exact score and the Bayes linear classifier at s = 1, targeting
    the first class: class occupancy must match the true conditional mixture.

    RETURN:
      ____ (CheckResult) -- class-occupancy TV check
    """
    classifier = gmmBayesClassifier(gmm)
    target = classifier.class_names[0]
    schedule = scheduleFromConfig(config)
    cfg = guidanceFromConfig(config, guidance_scale=1.0, cfg_weight=1.0,
                             v_interp=config["verify.v_interp"])
    x = sample(OracleDenoiser(gmm), None, [GuidanceTerm(classifier, target)], cfg,
               torchGenerator(seed), schedule, num=samples)

    occupancy = torch.mean(gmmClassPosterior(gmm, x), dim=0)
    expected = conditionalClassWeights(gmm, 0, torchGenerator(deriveSeed(seed, 1)))
    tv = totalVariation(occupancy, expected)
    return CheckResult("guided_class_tv", tv < GUIDED_TV, tv, GUIDED_TV)


def verifyFixture(filepath, config, samples, seed, verbose=True):
    """
    Run every oracle check on one mixture fixture.

    GIVEN:
      filepath (str) -- path to a mixture fixture
      config (RunConfig) -- resolved configuration (schedule and sampler keys)
      samples (int) -- samples per sampling check
      seed (int) -- base seed
      verbose (bool) -- print one line per check

    RETURN:
      ____ (list) -- CheckResult objects
    """
    gmm = loadGMMSpec(filepath)
    name = os.path.basename(filepath)
    error = checkScore(gmm, scheduleFromConfig(config), torchGenerator(deriveSeed(seed, 0)))
    results = [CheckResult("score_fd_rel_error", error < SCORE_TOLERANCE, error, SCORE_TOLERANCE)]
    results += checkUnconditional(gmm, config, samples, deriveSeed(seed, 1))
    try:
        results.append(checkGuided(gmm, config, samples, deriveSeed(seed, 2)))
    except GMMSpecError as e:
        if verbose:
            print("\t{}: guided check skipped ({})".format(name, e))

    if verbose:
        for result in results:
            print("\t{}: {} {} = {:.6g} (limit {:g})".format(
                name, "PASS" if result.passed else "FAIL", result.name, result.value,
                result.limit))
    return results


def verifyOracle(filepaths, config, samples=10000, seed=0, verbose=True):
    """
    Run the oracle suite on every fixture.

    RETURN:
      ____ (bool) -- True when every check passed
    """
    passed = True
    for filepath in filepaths:
        if verbose:
            print("Verifying {}...".format(filepath))
        results = verifyFixture(filepath, config, samples, seed, verbose)
        passed = passed and all(result.passed for result in results)
    if verbose:
        print("PASS" if passed else "FAIL")
    return passed


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
