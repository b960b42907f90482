#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import itertools
import math
import sys
from collections import OrderedDict, namedtuple


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
from scipy.special import logsumexp

from src.helpers import DGLMError, writeText


#### GLOBALS #######################################################################################
ROW_TOLERANCE = 1e-12
DEFAULT_ATTRIBUTES = OrderedDict([("sentiment", ["pos", "neg"]), ("topic", ["A", "B"])])
LEXICON_PREFIX = {"pos": "p", "neg": "n", "A": "a", "B": "b"}
FILLER_PREFIX = "f"
DIRICHLET_CONCENTRATION = 0.5

CorpusRecord = namedtuple("CorpusRecord", ["prefix", "continuation", "attributes"])


#### CLASSES #######################################################################################
class GrammarSpecError(DGLMError, ValueError):
    """
    Exception raised when a grammar has malformed tables or a grammar file cannot be parsed.
    """
    pass


class UnknownSymbolError(DGLMError, ValueError):
    """
    Exception raised when a token is not in the vocabulary.
    """
    pass


class CorpusFormatError(DGLMError, ValueError):
    """
    Exception raised when a corpus line cannot be parsed.
    """
    pass


class ToyGrammar(object):
    """
    Mixture of first-order Markov chains, one per attribute combination. Each combination c has
    a prior pi_c, a start distribution start[c] over symbols and a transition table
    trans[c][i] over next symbols. Sequence probabilities are exact, which makes the grammar
    its own perplexity and attribute oracle.
    """
    def __init__(self, vocabulary, attributes, combos, priors, start, trans, lexicons=None,
                 prefix_len=8, cont_len=16):
        self.vocabulary = list(vocabulary)
        self.attributes = OrderedDict(attributes)
        self.combos = [OrderedDict(combo) for combo in combos]
        self.priors = np.asarray(priors, dtype=np.float64)
        self.start = np.asarray(start, dtype=np.float64)
        self.trans = np.asarray(trans, dtype=np.float64)
        self.lexicons = OrderedDict(lexicons or dict())
        self.prefix_len = int(prefix_len)
        self.cont_len = int(cont_len)
        self.index = {symbol: i for i, symbol in enumerate(self.vocabulary)}
        self._validate()

        with np.errstate(divide="ignore"):
            self.log_priors = np.log(self.priors)
            self.log_start = np.log(self.start)
            self.log_trans = np.log(self.trans)
        self._start_cdf = np.cumsum(self.start, axis=-1)
        self._trans_cdf = np.cumsum(self.trans, axis=-1)


    def _validate(self):
        C, V = len(self.combos), len(self.vocabulary)
        if len(self.index) != V:
            raise GrammarSpecError("Vocabulary symbols must be unique.")
        if self.priors.shape != (C,) or self.start.shape != (C, V) or \
                self.trans.shape != (C, V, V):
            raise GrammarSpecError("Tables do not match {} combinations over {} symbols.".format(
                C, V))
        for name, table in [("prior", self.priors), ("start", self.start),
                            ("transition", self.trans)]:
            if np.any(table < 0) or np.any(np.abs(np.sum(table, axis=-1) - 1.0) > ROW_TOLERANCE):
                raise GrammarSpecError("Every {} row must be a probability distribution.".format(
                    name))
        for combo in self.combos:
            if list(combo.keys()) != list(self.attributes.keys()):
                raise GrammarSpecError("Combination {} does not name every attribute.".format(
                    dict(combo)))


    def encode(self, tokens):
        """
        Map symbols to vocabulary indices.
        """
        try:
            return np.asarray([self.index[token] for token in tokens], dtype=np.int64)
        except KeyError as e:
            raise UnknownSymbolError("Symbol {} is not in the vocabulary.".format(e))


    def comboLabel(self, combo):
        return ",".join("{}={}".format(k, v) for k, v in combo.items())


#### FUNCTIONS #####################################################################################
def _mixedRow(rng, groups):
    """
    A probability row placing mass[g] on group g, spread by a Dirichlet draw within each group.
    groups is a list of (indices, mass).
    """
    row = np.zeros(sum(len(indices) for indices, _ in groups))
    for indices, mass in groups:
        if len(indices) == 0 or mass == 0.0:
            continue
        row[indices] = mass * rng.dirichlet(np.full(len(indices), DIRICHLET_CONCENTRATION))
    return row / np.sum(row)


def buildGrammar(seed=7, lexicon_size=24, fillers=104, prefix_len=8, cont_len=16,
                 attr_mass=0.55, leak_mass=0.04, attributes=DEFAULT_ATTRIBUTES):
    """
    Procedurally build the attribute grammar. Every attribute value owns a lexicon of
    lexicon_size symbols; each combination's rows put attr_mass on its own lexicons, leak_mass on
    the other lexicons, and the rest on neutral fillers.

    GIVEN:
      seed (int) -- grammar seed
      lexicon_size (int) -- symbols per attribute value
      fillers (int) -- number of neutral symbols
      prefix_len (int) -- prefix tokens per record
      cont_len (int) -- continuation tokens per record
      attr_mass (float) -- mass on the combination's own lexicons
      leak_mass (float) -- mass on other lexicons
      attributes (OrderedDict) -- attribute name -> values

    RETURN:
      ____ (ToyGrammar) -- the grammar, with uniform combination priors
    """
    if attr_mass <= 0.0 or leak_mass < 0.0 or attr_mass + leak_mass >= 1.0:
        raise GrammarSpecError("Need attr_mass > 0, leak_mass >= 0 and attr_mass + leak_mass < 1.")
    rng = np.random.default_rng(seed)

    lexicons = OrderedDict()
    vocabulary = list()
    for name, values in attributes.items():
        for value in values:
            symbol_prefix = LEXICON_PREFIX.get(value, value.lower() + "_")
            words = ["{}{}".format(symbol_prefix, i) for i in range(lexicon_size)]
            lexicons["{}={}".format(name, value)] = words
            vocabulary.extend(words)
    filler_words = ["{}{}".format(FILLER_PREFIX, i) for i in range(fillers)]
    vocabulary.extend(filler_words)
    index = {symbol: i for i, symbol in enumerate(vocabulary)}
    filler_idx = [index[w] for w in filler_words]

    combos = [OrderedDict(zip(attributes.keys(), values))
              for values in itertools.product(*attributes.values())]
    start, trans = list(), list()
    for combo in combos:
        own_keys = {"{}={}".format(k, v) for k, v in combo.items()}
        own = [index[w] for key in own_keys for w in lexicons[key]]
        other = [index[w] for key, words in lexicons.items() if key not in own_keys for w in words]
        groups = [(own, attr_mass), (other, leak_mass), (filler_idx, 1.0 - attr_mass - leak_mass)]
        start.append(_mixedRow(rng, groups))
        trans.append(np.stack([_mixedRow(rng, groups) for _ in vocabulary]))

    priors = np.full(len(combos), 1.0 / len(combos))
    return ToyGrammar(vocabulary, attributes, combos, priors, np.stack(start), np.stack(trans),
                      lexicons, prefix_len, cont_len)


def grammarFromConfig(config):
    return buildGrammar(
        seed=config["grammar.seed"], lexicon_size=config["grammar.lexicon_size"],
        fillers=config["grammar.fillers"], prefix_len=config["grammar.prefix_len"],
        cont_len=config["grammar.cont_len"], attr_mass=config["grammar.attr_mass"],
        leak_mass=config["grammar.leak_mass"])


def _drawChain(grammar, c, length, rng):
    V = len(grammar.vocabulary)
    out = np.empty(length, dtype=np.int64)
    out[0] = min(int(np.searchsorted(grammar._start_cdf[c], rng.random(), side="right")), V - 1)
    for i in range(1, length):
        cdf = grammar._trans_cdf[c, out[i - 1]]
        out[i] = min(int(np.searchsorted(cdf, rng.random(), side="right")), V - 1)
    return out


def genCorpus(grammar, size, rng):
    """
    Draw corpus records: a combination from the priors, then one chain of
    prefix_len + cont_len symbols split into prefix and continuation.

    GIVEN:
      grammar (ToyGrammar) -- the grammar
      size (int) -- number of records
      rng (np.random.Generator) -- random stream

    RETURN:
      ____ (list) -- CorpusRecord tuples
    """
    total = grammar.prefix_len + grammar.cont_len
    records = list()
    for _ in range(int(size)):
        c = int(rng.choice(len(grammar.combos), p=grammar.priors))
        chain = [grammar.vocabulary[i] for i in _drawChain(grammar, c, total, rng)]
        records.append(CorpusRecord(chain[:grammar.prefix_len], chain[grammar.prefix_len:],
                                    OrderedDict(grammar.combos[c])))
    return records


def _comboLogProbs(grammar, tokens, prefix=None):
    """
    log p_c(prefix ++ tokens) and log p_c(prefix) for every combination c.
    """
    prefix = list(prefix or list())
    ids = grammar.encode(prefix + list(tokens))
    if len(ids) == 0:
        zeros = np.zeros(len(grammar.combos))
        return zeros, zeros
    steps = grammar.log_trans[:, ids[:-1], ids[1:]]
    cumulative = grammar.log_start[:, ids[0]][:, None] + np.concatenate(
        [np.zeros((len(grammar.combos), 1)), np.cumsum(steps, axis=1)], axis=1)
    full = cumulative[:, -1]
    if len(prefix) == 0:
        return full, np.zeros(len(grammar.combos))
    return full, cumulative[:, len(prefix) - 1]


def sequenceLogProb(grammar, tokens, prefix=None):
    """
    log p(tokens | prefix) under the mixture with combinations marginalized.
    """
    full, given = _comboLogProbs(grammar, tokens, prefix)
    return float(logsumexp(grammar.log_priors + full) - logsumexp(grammar.log_priors + given))


def truePerplexity(grammar, tokens, prefix=None):
    """
    Exact per-token perplexity exp(-log p(tokens | prefix) / len(tokens)) under the grammar's
    mixture over attribute combinations.

    GIVEN:
      grammar (ToyGrammar) -- the grammar
      tokens (list) -- symbols to score
      prefix (list) -- optional conditioning symbols

    RETURN:
      ____ (float) -- perplexity
    """
    if len(tokens) == 0:
        raise ValueError("Cannot compute the perplexity of an empty sequence.")
    return math.exp(-sequenceLogProb(grammar, tokens, prefix) / len(tokens))


def attributeScores(grammar, tokens, attribute, prefix=None):
    """
    Exact posterior of each value of an attribute given the tokens (Bayes over the chain
    mixture).

    GIVEN:
      grammar (ToyGrammar) -- the grammar
      tokens (list) -- symbols to score
      attribute (str) -- attribute name
      prefix (list) -- optional conditioning symbols

    RETURN:
      ____ (OrderedDict) -- value -> probability
    """
    if attribute not in grammar.attributes:
        raise GrammarSpecError("Unknown attribute '{}'.".format(attribute))
    full, _ = _comboLogProbs(grammar, tokens, prefix)
    joint = grammar.log_priors + full
    posterior = np.exp(joint - logsumexp(joint))
    scores = OrderedDict((value, 0.0) for value in grammar.attributes[attribute])
    for combo, p in zip(grammar.combos, posterior):
        scores[combo[attribute]] += float(p)
    return scores


def allAttributeScores(grammar, tokens):
    """
    Flattened 'attribute:value' -> posterior for every attribute, as written to generation files.
    """
    out = OrderedDict()
    for attribute in grammar.attributes:
        for value, p in attributeScores(grammar, tokens, attribute).items():
            out["{}:{}".format(attribute, value)] = p
    return out


def saveGrammar(grammar, filepath):
    """
    Write the grammar as plain text. Probabilities use repr so they round-trip exactly.
    """
    lines = ["lengths {} {}".format(grammar.prefix_len, grammar.cont_len)]
    for name, values in grammar.attributes.items():
        lines.append("attribute {} {}".format(name, " ".join(values)))
    lines.append("vocabulary {}".format(" ".join(grammar.vocabulary)))
    for key, words in grammar.lexicons.items():
        lines.append("lexicon {} {}".format(key, " ".join(words)))
    for c, combo in enumerate(grammar.combos):
        label = grammar.comboLabel(combo) or "-"
        lines.append("prior {} {!r}".format(label, float(grammar.priors[c])))
        start = " ".join(repr(float(p)) for p in grammar.start[c])
        lines.append("start {} {}".format(label, start))
        for i, symbol in enumerate(grammar.vocabulary):
            lines.append("row {} {} {}".format(label, symbol, " ".join(
                repr(float(p)) for p in grammar.trans[c, i])))
    writeText(filepath, "\n".join(lines) + "\n")


def _parseCombo(label):
    if label == "-":
        return OrderedDict()
    return OrderedDict(item.split("=", 1) for item in label.split(","))


def loadGrammar(filepath):
    """
    Read a grammar written by saveGrammar (or by hand in the same format).
    """
    prefix_len, cont_len = 8, 16
    attributes, lexicons = OrderedDict(), OrderedDict()
    vocabulary = None
    labels, priors, starts, rows = list(), dict(), dict(), dict()
    with open(filepath, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if line == "":
                continue
            fields = line.split()
            try:
                kind = fields[0]
                if kind == "lengths":
                    prefix_len, cont_len = int(fields[1]), int(fields[2])
                elif kind == "attribute":
                    attributes[fields[1]] = fields[2:]
                elif kind == "vocabulary":
                    vocabulary = fields[1:]
                elif kind == "lexicon":
                    lexicons[fields[1]] = fields[2:]
                elif kind == "prior":
                    labels.append(fields[1])
                    priors[fields[1]] = float(fields[2])
                elif kind == "start":
                    starts[fields[1]] = [float(p) for p in fields[2:]]
                elif kind == "row":
                    rows.setdefault(fields[1], dict())[fields[2]] = [float(p) for p in fields[3:]]
                else:
                    raise GrammarSpecError("unknown directive '{}'".format(kind))
            except (IndexError, ValueError) as e:
                raise GrammarSpecError("Line {} of '{}' is malformed: {}".format(
                    line_number, filepath, e))

    if vocabulary is None or len(labels) == 0:
        raise GrammarSpecError("'{}' needs a vocabulary and at least one prior.".format(filepath))
    try:
        start = [starts[label] for label in labels]
        trans = [[rows[label][symbol] for symbol in vocabulary] for label in labels]
    except KeyError as e:
        raise GrammarSpecError("'{}' is missing table entries for {}.".format(filepath, e))

    return ToyGrammar(vocabulary, attributes, [_parseCombo(label) for label in labels],
                      [priors[label] for label in labels], start, trans, lexicons, prefix_len,
                      cont_len)


def formatAttributes(attributes):
    return ",".join("{}={}".format(k, v) for k, v in attributes.items())


def saveCorpus(records, filepath):
    """
    One record per line: prefix, continuation and attribute=value pairs, tab-separated.
    """
    lines = ["{}\t{}\t{}".format(" ".join(r.prefix), " ".join(r.continuation),
                                 formatAttributes(r.attributes)) for r in records]
    writeText(filepath, "\n".join(lines) + "\n")


def loadCorpus(filepath):
    """
    Read corpus records written by saveCorpus.
    """
    records = list()
    with open(filepath, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if line == "":
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise CorpusFormatError("Line {} of '{}' has {} fields, expected 3.".format(
                    line_number, filepath, len(fields)))
            try:
                attributes = OrderedDict(
                    item.split("=", 1) for item in fields[2].split(",") if item != "")
            except ValueError:
                raise CorpusFormatError("Line {} of '{}' has malformed attributes.".format(
                    line_number, filepath))
            records.append(CorpusRecord(fields[0].split(), fields[1].split(), attributes))
    return records


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
