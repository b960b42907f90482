#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import sys


#### PACKAGE IMPORTS ###############################################################################
import numpy as np

from src.grammar import UnknownSymbolError
from src.helpers import DGLMError


#### CLASSES #######################################################################################
class EmptyTokensError(DGLMError, ValueError):
    """
    Exception raised when asked to embed an empty token list.
    """
    pass


class Embedder(object):
    """
    Bag-of-symbols semantic embedder: symbol counts through a fixed seeded Gaussian projection,
    then unit-normalized. Token order never matters.
    """
    def __init__(self, vocabulary, dim=64, seed=1234):
        self.vocabulary = list(vocabulary)
        self.index = {symbol: i for i, symbol in enumerate(self.vocabulary)}
        self.dim = int(dim)
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((len(self.vocabulary), self.dim)) / np.sqrt(self.dim)


    def counts(self, tokens):
        out = np.zeros(len(self.vocabulary))
        for token in tokens:
            if token not in self.index:
                raise UnknownSymbolError("Symbol '{}' is not in the vocabulary.".format(token))
            out[self.index[token]] += 1.0
        return out


#### FUNCTIONS #####################################################################################
def embedderFromConfig(config, vocabulary):
    return Embedder(vocabulary, dim=config["embed.dim"], seed=config["embed.seed"])


def embed(embedder, tokens):
    """
    Embed one token list.

    GIVEN:
      embedder (Embedder) -- the embedder
      tokens (list) -- symbols

    RETURN:
      ____ (np.ndarray) -- (d,) unit-norm float64 vector
    """
    if len(tokens) == 0:
        raise EmptyTokensError("Cannot embed an empty token list.")
    vector = embedder.counts(tokens) @ embedder.projection
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        raise EmptyTokensError("Tokens project to the zero vector.")
    return vector / norm


def embedMany(embedder, token_lists):
    """
    Embed a list of token lists into an (N, d) array.
    """
    return np.stack([embed(embedder, tokens) for tokens in token_lists])


def cosine(a, b):
    """
    Cosine similarity of two vectors.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
