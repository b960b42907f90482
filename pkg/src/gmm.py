#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import math
import sys
from dataclasses import dataclass


#### PACKAGE IMPORTS ###############################################################################
import torch

from src.classifier import LinearAttributeClassifier
from src.helpers import DGLMError, checkDim


#### GLOBALS #######################################################################################
WEIGHT_TOLERANCE = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


#### CLASSES #######################################################################################
class GMMSpecError(DGLMError, ValueError):
    """
    Exception raised when a mixture or a mixture fixture file is malformed.
    """
    pass


@dataclass
class LabeledGMM(object):
    """
    Diagonal Gaussian mixture whose components carry integer class labels. All tensors are
    float64: weights (K,), means (K, d), diag_vars (K, d), labels (K,) as a python list.
    """
    weights: torch.Tensor
    means: torch.Tensor
    diag_vars: torch.Tensor
    labels: list

    def __post_init__(self):
        self.weights = torch.as_tensor(self.weights, dtype=torch.float64)
        self.means = torch.as_tensor(self.means, dtype=torch.float64)
        self.diag_vars = torch.as_tensor(self.diag_vars, dtype=torch.float64)
        self.labels = [int(label) for label in self.labels]

        if self.means.dim() != 2 or self.diag_vars.shape != self.means.shape:
            raise GMMSpecError("means and diag_vars must both be (K, d).")
        if self.weights.shape != (self.means.shape[0],) or len(self.labels) != len(self.weights):
            raise GMMSpecError("weights and labels need one entry per component.")
        if torch.any(self.weights < 0):
            raise GMMSpecError("Mixture weights must be nonnegative.")
        if abs(float(torch.sum(self.weights)) - 1.0) > WEIGHT_TOLERANCE:
            raise GMMSpecError("Mixture weights sum to {}, not 1.".format(
                float(torch.sum(self.weights))))
        if torch.any(self.diag_vars <= 0):
            raise GMMSpecError("All component variances must be positive.")

    @property
    def dim(self):
        return int(self.means.shape[1])

    @property
    def classes(self):
        return sorted(set(self.labels))


#### FUNCTIONS #####################################################################################
def _asBatch(gmm, z):
    z = torch.as_tensor(z, dtype=torch.float64)
    checkDim("z", z, gmm.dim)
    return z.reshape(-1, gmm.dim), z.dim() == 1


def _componentLogJoint(gmm, z, alpha, sigma):
    """
    log pi_k + log N(z; alpha mu_k, alpha^2 v_k + sigma^2) for every row and component, plus the
    per-component variances. z is (B, d); the result is (B, K).
    """
    var = alpha ** 2 * gmm.diag_vars + sigma ** 2
    diff = z[:, None, :] - alpha * gmm.means[None, :, :]
    log_normal = -0.5 * torch.sum(LOG_2PI + torch.log(var)[None] + diff ** 2 / var[None], dim=-1)
    return torch.log(gmm.weights)[None, :] + log_normal, diff, var


def gmmLogDensity(gmm, z, alpha=1.0, sigma=0.0):
    """
    Log density of the diffused marginal sum_k pi_k N(alpha mu_k, alpha^2 v_k + sigma^2).

    GIVEN:
      gmm (LabeledGMM) -- the clean mixture
      z (torch.Tensor) -- point(s), (d,) or (B, d)
      alpha (float) -- signal scale
      sigma (float) -- noise scale

    RETURN:
      ____ (torch.Tensor) -- scalar or (B,) log densities
    """
    zb, single = _asBatch(gmm, z)
    log_joint, _, _ = _componentLogJoint(gmm, zb, alpha, sigma)
    out = torch.logsumexp(log_joint, dim=-1)
    return out[0] if single else out


def gmmScore(gmm, z, alpha, sigma):
    """
    Exact score of the diffused marginal:
        score(z) = sum_k r_k(z) * (-(z - alpha mu_k) / (alpha^2 v_k + sigma^2))
    with responsibilities r_k from a log-sum-exp softmax.

    GIVEN:
      gmm (LabeledGMM) -- the clean mixture
      z (torch.Tensor) -- point(s), (d,) or (B, d)
      alpha (float) -- signal scale
      sigma (float) -- noise scale, alpha^2 + sigma^2 = 1

    RETURN:
      ____ (torch.Tensor) -- score, same shape as z
    """
    zb, single = _asBatch(gmm, z)
    log_joint, diff, var = _componentLogJoint(gmm, zb, alpha, sigma)
    resp = torch.softmax(log_joint, dim=-1)
    score = torch.sum(resp[:, :, None] * (-diff / var[None]), dim=1)
    return score[0] if single else score


def gmmResponsibilities(gmm, x):
    """
    Component posteriors p(k | x) under the clean mixture. Returns (K,) or (B, K).
    """
    xb, single = _asBatch(gmm, x)
    log_joint, _, _ = _componentLogJoint(gmm, xb, 1.0, 0.0)
    resp = torch.softmax(log_joint, dim=-1)
    return resp[0] if single else resp


def gmmClassPosterior(gmm, x):
    """
    Class posterior p(y | x) proportional to the summed joint of the components labeled y.

    GIVEN:
      gmm (LabeledGMM) -- the clean mixture
      x (torch.Tensor) -- point(s), (d,) or (B, d)

    RETURN:
      ____ (torch.Tensor) -- (C,) or (B, C) probabilities, columns ordered as gmm.classes
    """
    xb, single = _asBatch(gmm, x)
    log_joint, _, _ = _componentLogJoint(gmm, xb, 1.0, 0.0)
    labels = torch.as_tensor(gmm.labels)
    per_class = torch.stack([
        torch.logsumexp(log_joint[:, labels == c], dim=-1) for c in gmm.classes
    ], dim=-1)
    post = torch.softmax(per_class, dim=-1)
    return post[0] if single else post


def gmmSample(gmm, n, generator):
    """
    Draw n samples: a component from the weights, then a diagonal Gaussian draw.

    GIVEN:
      gmm (LabeledGMM) -- the mixture
      n (int) -- number of samples
      generator (torch.Generator) -- random stream

    RETURN:
      x (torch.Tensor) -- (n, d) samples
      labels (torch.Tensor) -- (n,) class label of each sample's component
    """
    components = torch.multinomial(gmm.weights, int(n), replacement=True, generator=generator)
    noise = torch.randn(int(n), gmm.dim, generator=generator, dtype=torch.float64)
    x = gmm.means[components] + torch.sqrt(gmm.diag_vars[components]) * noise
    labels = torch.as_tensor(gmm.labels)[components]
    return x, labels


def classWeights(gmm):
    """
    Total mixture weight of each class, ordered as gmm.classes.
    """
    labels = torch.as_tensor(gmm.labels)
    return torch.stack([torch.sum(gmm.weights[labels == c]) for c in gmm.classes])


def gmmBayesClassifier(gmm, attribute="class"):
    """
    Exact linear classifier for a mixture with one component per class and a shared diagonal
    variance v: W_c = mu_c / v, b_c = log pi_c - sum(mu_c^2 / (2 v)).

    GIVEN:
      gmm (LabeledGMM) -- mixture with one component per class
      attribute (str) -- attribute name recorded on the classifier

    RETURN:
      ____ (LinearAttributeClassifier) -- the Bayes classifier
    """
    if len(gmm.classes) != len(gmm.labels):
        raise GMMSpecError("A Bayes linear classifier needs exactly one component per class.")
    if not torch.equal(gmm.diag_vars, gmm.diag_vars[0].expand_as(gmm.diag_vars)):
        raise GMMSpecError("A Bayes linear classifier needs a shared diagonal variance.")

    order = sorted(range(len(gmm.labels)), key=lambda k: gmm.labels[k])
    var = gmm.diag_vars[0]
    W = gmm.means[order] / var
    b = torch.log(gmm.weights[order]) - torch.sum(gmm.means[order] ** 2 / (2.0 * var), dim=-1)
    class_names = [str(gmm.labels[k]) for k in order]
    return LinearAttributeClassifier.fromLogitRows(W, b, class_names, attribute)


def loadGMMSpec(filepath):
    """
    Parse a mixture fixture file:

        # comment
        dim 2
        component weight=0.5 label=0 mean=2.0,0.0 var=0.25,0.25

    GIVEN:
      filepath (str) -- path to the fixture

    RETURN:
      ____ (LabeledGMM) -- the mixture
    """
    dim = None
    weights, means, variances, labels = list(), list(), list(), list()
    with open(filepath, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if line == "":
                continue
            fields = line.split()
            try:
                if fields[0] == "dim":
                    dim = int(fields[1])
                elif fields[0] == "component":
                    entry = dict(field.split("=", 1) for field in fields[1:])
                    weights.append(float(entry["weight"]))
                    labels.append(int(entry["label"]))
                    means.append([float(v) for v in entry["mean"].split(",")])
                    variances.append([float(v) for v in entry["var"].split(",")])
                else:
                    raise GMMSpecError("Unknown directive '{}'.".format(fields[0]))
            except (IndexError, KeyError, ValueError) as e:
                raise GMMSpecError("Line {} of '{}' is malformed: {}".format(
                    line_number, filepath, e))

    if dim is None or len(weights) == 0:
        raise GMMSpecError("'{}' needs a 'dim' line and at least one component.".format(filepath))
    if any(len(m) != dim for m in means) or any(len(v) != dim for v in variances):
        raise GMMSpecError("Every mean and var in '{}' must have {} entries.".format(
            filepath, dim))

    return LabeledGMM(weights=weights, means=means, diag_vars=variances, labels=labels)


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
