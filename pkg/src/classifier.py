#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import sys


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax
from scipy.stats import rankdata

from src.checkpoint import CheckpointFormatError, loadCheckpoint, saveCheckpoint
from src.helpers import DGLMError, checkDim


#### GLOBALS #######################################################################################
DEFAULT_L2 = 1e-3
GTOL = 1e-6
MAX_ITER = 1000
CHECKPOINT_KIND = "classifier"


#### CLASSES #######################################################################################
class SingleClassError(DGLMError, ValueError):
    """
    Exception raised when a classifier is fit on data with fewer than two classes.
    """
    pass


class UnknownClassError(DGLMError, ValueError):
    """
    Exception raised when a class id or name is not one of the classifier's classes.
    """
    pass


class LinearAttributeClassifier(object):
    """
    Multinomial logistic regression p(y | x) = softmax(W x + b). A binary classifier stores a
    single row w and bias b; its logits are (0, w.x + b), so class 1 has probability
    logistic(w.x + b).
    """
    def __init__(self, W, b, class_names, attribute=""):
        self.W = torch.as_tensor(W, dtype=torch.float64)
        if self.W.dim() == 1:
            self.W = self.W[None, :]
        self.b = torch.as_tensor(b, dtype=torch.float64).reshape(-1)
        self.class_names = [str(name) for name in class_names]
        self.attribute = attribute

        if len(self.class_names) < 2:
            raise SingleClassError("A classifier needs at least two classes.")
        rows = 1 if self.binary else len(self.class_names)
        if self.W.shape[0] != rows or self.b.shape[0] != rows:
            raise ValueError("Expected {} weight rows for {} classes, got {}.".format(
                rows, len(self.class_names), self.W.shape[0]))
        if not (torch.all(torch.isfinite(self.W)) and torch.all(torch.isfinite(self.b))):
            raise ValueError("Classifier parameters must be finite.")


    @classmethod
    def fromLogitRows(cls, W, b, class_names, attribute=""):
        """
        Build from one logit row per class, folding two-class problems into a single row.
        """
        W = torch.as_tensor(W, dtype=torch.float64)
        b = torch.as_tensor(b, dtype=torch.float64)
        if W.shape[0] == 2:
            return cls(W[1] - W[0], b[1:] - b[:1], class_names, attribute)
        return cls(W, b, class_names, attribute)


    @property
    def binary(self):
        return len(self.class_names) == 2


    @property
    def dim(self):
        return int(self.W.shape[1])


    def classIndex(self, y):
        """
        Column index of a class given as an index or a class name.
        """
        if isinstance(y, str):
            if y not in self.class_names:
                raise UnknownClassError("Unknown class '{}' for attribute '{}'; known: {}.".format(
                    y, self.attribute, self.class_names))
            return self.class_names.index(y)
        y = int(y)
        if not 0 <= y < len(self.class_names):
            raise UnknownClassError("Class id {} outside [0, {}).".format(y, len(self.class_names)))
        return y


    def logits(self, x):
        """
        Full per-class logits for a (d,) vector or (B, d) batch.
        """
        x = torch.as_tensor(x)
        checkDim("x", x, self.dim)
        W = self.W.to(x.dtype)
        b = self.b.to(x.dtype)
        raw = x @ W.T + b
        if self.binary:
            raw = torch.cat([torch.zeros_like(raw), raw], dim=-1)
        return raw


#### FUNCTIONS #####################################################################################
def logProb(clf, x, y):
    """
    log p(y | x) = log softmax(W x + b)[y]. The cross-entropy loss is -logProb.

    GIVEN:
      clf (LinearAttributeClassifier) -- the classifier
      x (torch.Tensor) -- (d,) or (B, d) inputs
      y (int|str) -- class id or name

    RETURN:
      ____ (torch.Tensor) -- scalar or (B,) log-probabilities
    """
    index = clf.classIndex(y)
    return torch.log_softmax(clf.logits(x), dim=-1)[..., index]


def lossGradX(clf, x, y):
    """
    Gradient of the cross-entropy loss with respect to the input:
        W^T (softmax(W x + b) - onehot(y)),  or (p - [y == 1]) w for a single binary row.

    GIVEN:
      clf (LinearAttributeClassifier) -- the classifier
      x (torch.Tensor) -- (d,) or (B, d) inputs
      y (int|str) -- class id or name

    RETURN:
      ____ (torch.Tensor) -- gradient, same shape as x
    """
    index = clf.classIndex(y)
    x = torch.as_tensor(x)
    probs = torch.softmax(clf.logits(x), dim=-1)
    W = clf.W.to(x.dtype)
    if clf.binary:
        coef = probs[..., 1:] - float(index == 1)
        return coef * W[0]
    onehot = torch.zeros(probs.shape[-1], dtype=x.dtype)
    onehot[index] = 1.0
    return (probs - onehot) @ W


def predictProba(clf, X):
    """
    Class probabilities as a numpy array, (N, C) for a batch.
    """
    with torch.no_grad():
        return torch.softmax(clf.logits(torch.as_tensor(X, dtype=torch.float64)), dim=-1).numpy()


def _objective(params, X, targets, sample_weight, l2, rows):
    """
    Weighted mean cross-entropy plus l2 ||W||^2 / 2, and its gradient. params packs W (rows, d)
    then b (rows,).
    """
    n, d = X.shape
    W = params[:rows * d].reshape(rows, d)
    b = params[rows * d:]
    raw = X @ W.T + b
    if rows == 1:
        logits = np.hstack([np.zeros((n, 1)), raw])
    else:
        logits = raw

    log_norm = logsumexp(logits, axis=1)
    nll = log_norm - logits[np.arange(n), targets]
    loss = np.sum(sample_weight * nll) / n + 0.5 * l2 * np.sum(W ** 2)

    delta = softmax(logits, axis=1)
    delta[np.arange(n), targets] -= 1.0
    delta *= (sample_weight / n)[:, None]
    if rows == 1:
        delta = delta[:, 1:]
    grad_W = delta.T @ X + l2 * W
    grad_b = np.sum(delta, axis=0)

    return loss, np.concatenate([grad_W.ravel(), grad_b])


def balancedWeights(targets, num_classes):
    """
    Per-example weights total / (classes * class_count).
    """
    counts = np.bincount(targets, minlength=num_classes).astype(np.float64)
    return (len(targets) / (num_classes * counts))[targets]


def fit(X, y, l2=DEFAULT_L2, balanced=False, class_names=None, attribute=""):
    """
    Fit a logistic-regression classifier with L-BFGS to a gradient norm below 1e-6 or 1000
    iterations.

    GIVEN:
      X (np.ndarray) -- (N, d) inputs
      y (list) -- N class labels (any sortable values)
      l2 (float) -- L2 penalty on W
      balanced (bool) -- reweight examples by inverse class frequency
      class_names (list) -- optional explicit class order; defaults to the sorted labels
      attribute (str) -- attribute name stored with the classifier

    RETURN:
      ____ (LinearAttributeClassifier) -- the fitted classifier
    """
    X = np.asarray(X, dtype=np.float64)
    labels = [str(label) for label in y]
    if class_names is None:
        class_names = sorted(set(labels))
    class_names = [str(name) for name in class_names]
    if len(set(labels)) < 2:
        raise SingleClassError("Cannot fit a classifier on a single class ({}).".format(
            sorted(set(labels))))
    unknown = sorted(set(labels) - set(class_names))
    if unknown:
        raise UnknownClassError("Labels {} are not among {}.".format(unknown, class_names))

    targets = np.asarray([class_names.index(label) for label in labels])
    num_classes = len(class_names)
    rows = 1 if num_classes == 2 else num_classes
    if balanced:
        sample_weight = balancedWeights(targets, num_classes)
    else:
        sample_weight = np.ones(len(targets))

    start = np.zeros(rows * (X.shape[1] + 1))
    result = minimize(_objective, start, args=(X, targets, sample_weight, l2, rows), jac=True,
                      method="L-BFGS-B", options={"gtol": GTOL, "maxiter": MAX_ITER})
    if not result.success:
        print("WARNING: L-BFGS-B did not converge after {} iterations ({}).".format(
            result.nit, result.message))

    d = X.shape[1]
    W = result.x[:rows * d].reshape(rows, d)
    b = result.x[rows * d:]
    return LinearAttributeClassifier(W, b, class_names, attribute)


def trainingLoss(clf, X, y, l2=DEFAULT_L2):
    """
    Unweighted objective value of a fitted classifier on its training data.
    """
    targets = np.asarray([clf.classIndex(str(label)) for label in y])
    params = np.concatenate([clf.W.numpy().ravel(), clf.b.numpy()])
    loss, _ = _objective(params, np.asarray(X, dtype=np.float64), targets,
                         np.ones(len(targets)), l2, clf.W.shape[0])
    return float(loss)


def auroc(scores, positives):
    """
    Area under the ROC curve via the Mann-Whitney rank statistic (ties get average ranks).

    GIVEN:
      scores (np.ndarray) -- higher means more positive
      positives (np.ndarray) -- bool, True for positive examples

    RETURN:
      ____ (float) -- AUROC, or nan when one side is empty
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    num_pos = int(np.sum(positives))
    num_neg = len(positives) - num_pos
    if num_pos == 0 or num_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((np.sum(ranks[positives]) - num_pos * (num_pos + 1) / 2.0) / (num_pos * num_neg))


def evaluateClassifier(clf, X, y):
    """
    Accuracy and AUROC on labeled data. Multiclass AUROC is the one-vs-rest macro average.

    RETURN:
      accuracy (float) -- fraction of argmax predictions that match
      auc (float) -- AUROC
    """
    probs = predictProba(clf, X)
    targets = np.asarray([clf.classIndex(str(label)) for label in y])
    accuracy = float(np.mean(np.argmax(probs, axis=1) == targets))
    if clf.binary:
        auc = auroc(probs[:, 1], targets == 1)
    else:
        per_class = [auroc(probs[:, c], targets == c) for c in range(len(clf.class_names))]
        auc = float(np.nanmean(per_class))
    return accuracy, auc


def saveClassifier(clf, filepath):
    """
    Save W, b and the class names to the shared checkpoint container.
    """
    saveCheckpoint(filepath, {"W": clf.W, "b": clf.b}, {
        "kind": CHECKPOINT_KIND, "class_names": clf.class_names, "attribute": clf.attribute,
    })


def loadClassifier(filepath):
    """
    Load a classifier written by saveClassifier.
    """
    tensors, meta = loadCheckpoint(filepath)
    if "W" not in tensors or "b" not in tensors or meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointFormatError("'{}' is not a classifier checkpoint.".format(filepath))
    return LinearAttributeClassifier(tensors["W"].astype(np.float64),
                                     tensors["b"].astype(np.float64),
                                     meta["class_names"], meta.get("attribute", ""))


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
