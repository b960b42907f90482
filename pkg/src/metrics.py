#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import math
import multiprocessing as mproc
import sys
from collections import OrderedDict, namedtuple


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
from nltk.util import ngrams

from src.embedder import cosine, embed, embedMany
from src.grammar import attributeScores, truePerplexity
from src.helpers import DGLMError, formatFloat, writeText


#### GLOBALS #######################################################################################
DIV_ORDERS = [2, 3, 4]
DEFAULT_ATTRIBUTE_KEY = "sentiment:pos"
BASELINE_PAIRS = 1000
# Filled per process by _initWorker so the grammar is pickled once per worker, not per prompt.
_WORKER_STATE = dict()

GenerationRecord = namedtuple("GenerationRecord", ["prompt_id", "tokens", "scores"])
AttributeRates = namedtuple("AttributeRates", ["avg_max", "rate", "mean_prop", "excluded"])


#### CLASSES #######################################################################################
class EmptySampleSetError(DGLMError, ValueError):
    """
    Exception raised when a metric has no usable samples left.
    """
    pass


class MissingProposalError(DGLMError, ValueError):
    """
    Exception raised when a continuation has no proposal embedding to compare against.
    """
    pass


class GenerationFormatError(DGLMError, ValueError):
    """
    Exception raised when a generation file line is malformed.
    """
    pass


class GenerationSet(object):
    """
    Generated continuations in file order, grouped on demand by prompt id.
    """
    def __init__(self, records=None):
        self.records = list()
        for record in (records or list()):
            self.add(record.prompt_id, record.tokens, record.scores)


    def add(self, prompt_id, tokens, scores=None):
        tokens = list(tokens)
        if len(tokens) == 0:
            raise GenerationFormatError("Prompt '{}' has an empty continuation.".format(prompt_id))
        self.records.append(GenerationRecord(str(prompt_id), tokens, OrderedDict(scores or dict())))


    def __len__(self):
        return len(self.records)


    def prompts(self):
        """
        OrderedDict prompt_id -> list of GenerationRecord, prompts in order of first appearance.
        """
        grouped = OrderedDict()
        for record in self.records:
            grouped.setdefault(record.prompt_id, list()).append(record)
        return grouped


    def continuations(self):
        return [record.tokens for record in self.records]


#### FUNCTIONS #####################################################################################
def _parseScores(field, line_number, filepath):
    scores = OrderedDict()
    for item in field.split(","):
        if item == "":
            continue
        try:
            key, value = item.split("=", 1)
            scores[key] = float(value)
        except ValueError:
            raise GenerationFormatError("Line {} of '{}' has a malformed score '{}'.".format(
                line_number, filepath, item))
    return scores


def loadGenerations(filepath):
    """
    Read a generation file: one continuation per line,
        prompt-id <TAB> space-separated tokens [<TAB> key=value,key=value]

    GIVEN:
      filepath (str) -- path to the generation file

    RETURN:
      ____ (GenerationSet) -- the continuations in file order
    """
    generation_set = GenerationSet()
    with open(filepath, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if line == "":
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3) or fields[0] == "":
                raise GenerationFormatError(
                    "Line {} of '{}' has {} fields, expected 2 or 3.".format(
                        line_number, filepath, len(fields)))
            tokens = fields[1].split()
            if len(tokens) == 0:
                raise GenerationFormatError("Line {} of '{}' has an empty continuation.".format(
                    line_number, filepath))
            scores = _parseScores(fields[2], line_number, filepath) if len(fields) == 3 else None
            generation_set.add(fields[0], tokens, scores)
    return generation_set


def writeGenerations(generation_set, filepath):
    """
    Write a GenerationSet in the format read by loadGenerations.
    """
    lines = list()
    for record in generation_set.records:
        line = "{}\t{}".format(record.prompt_id, " ".join(record.tokens))
        if len(record.scores) > 0:
            line += "\t" + ",".join("{}={}".format(k, formatFloat(v))
                                    for k, v in record.scores.items())
        lines.append(line)
    writeText(filepath, "\n".join(lines) + "\n")


def divMetric(samples):
    """
    Pooled n-gram diversity: the product over n in {2, 3, 4} of unique / total n-grams across
    the whole sample set. Sequences shorter than 4 tokens are excluded with a warning.

    GIVEN:
      samples (list) -- token lists

    RETURN:
      ____ (float) -- diversity in (0, 1]
    """
    kept = [list(tokens) for tokens in samples if len(tokens) >= max(DIV_ORDERS)]
    if len(kept) < len(samples):
        print("WARNING: excluded {} sequences shorter than {} tokens from div.".format(
            len(samples) - len(kept), max(DIV_ORDERS)))
    if len(kept) == 0:
        raise EmptySampleSetError("No sequences of at least {} tokens to score.".format(
            max(DIV_ORDERS)))

    div = 1.0
    for n in DIV_ORDERS:
        grams = [gram for tokens in kept for gram in ngrams(tokens, n)]
        div *= len(set(grams)) / len(grams)
    return div


def _distinctCounts(args):
    """
    (unique, total, skipped) n-gram counts over one prompt's continuations.
    """
    continuations, n = args
    grams = list()
    skipped = 0
    for tokens in continuations:
        if len(tokens) < n:
            skipped += 1
            continue
        grams.extend(ngrams(tokens, n))
    return len(set(grams)), len(grams), skipped


def _mapPrompts(fn, items, num_procs, grammar=None):
    """
    Map fn over per-prompt items, in order, in a process pool when num_procs > 1.
    """
    if num_procs <= 1:
        _initWorker(grammar)
        return [fn(item) for item in items]
    pool = mproc.Pool(num_procs, initializer=_initWorker, initargs=(grammar,))
    try:
        return pool.map(fn, items, chunksize=max(1, len(items) // (4 * num_procs)))
    finally:
        pool.close()
        pool.join()


def _initWorker(grammar):
    _WORKER_STATE["grammar"] = grammar


def distN(generation_set, n=3, num_procs=1):
    """
    Per-prompt distinct n-gram ratio (unique / total across the prompt's continuations),
    averaged over prompts. Continuations shorter than n are skipped with a warning.

    GIVEN:
      generation_set (GenerationSet) -- the generations
      n (int) -- n-gram order
      num_procs (int) -- worker processes

    RETURN:
      ____ (float) -- mean ratio
    """
    prompts = generation_set.prompts()
    items = [([record.tokens for record in records], n) for records in prompts.values()]
    counts = _mapPrompts(_distinctCounts, items, num_procs)

    skipped = sum(c[2] for c in counts)
    if skipped > 0:
        print("WARNING: skipped {} continuations shorter than {} tokens in dist_{}.".format(
            skipped, n, n))
    ratios = [unique / total for unique, total, _ in counts if total > 0]
    if len(ratios) == 0:
        raise EmptySampleSetError("No prompt has a continuation of at least {} tokens.".format(n))
    return math.fsum(ratios) / len(ratios)


def splitAttributeKey(key):
    """
    'sentiment:pos' -> ('sentiment', 'pos').
    """
    if ":" not in key:
        raise ValueError("Attribute key '{}' must look like 'attribute:value'.".format(key))
    attribute, value = key.split(":", 1)
    return attribute, value


def grammarOracle(grammar, key):
    """
    Attribute oracle for one 'attribute:value' key: the grammar's exact posterior of that
    value given the continuation.
    """
    attribute, value = splitAttributeKey(key)

    def oracle(tokens):
        return attributeScores(grammar, tokens, attribute)[value]

    return oracle


def attributeRates(generation_set, key=DEFAULT_ATTRIBUTE_KEY, threshold=0.5, oracle=None):
    """
    Attribute statistics over a generation set. Each continuation's score is read from its
    stored scores, falling back to the oracle; continuations with no score or an oracle
    failure are excluded and counted.

    GIVEN:
      generation_set (GenerationSet) -- the generations
      key (str) -- 'attribute:value' score key
      threshold (float) -- a continuation is positive when its score is >= threshold
      oracle (function) -- optional tokens -> score

    RETURN:
      ____ (AttributeRates) -- avg_max, rate, mean_prop, excluded
    """
    maxima, hits = list(), list()
    positives, scored, excluded = 0, 0, 0
    for prompt_id, records in generation_set.prompts().items():
        scores = list()
        for record in records:
            if key in record.scores:
                scores.append(record.scores[key])
                continue
            try:
                if oracle is None:
                    raise KeyError(key)
                scores.append(float(oracle(record.tokens)))
            except (DGLMError, KeyError, ValueError) as e:
                excluded += 1
                print("WARNING: no '{}' score for a continuation of prompt '{}' ({}).".format(
                    key, prompt_id, e))
        if len(scores) == 0:
            continue
        maxima.append(max(scores))
        hits.append(1.0 if any(s >= threshold for s in scores) else 0.0)
        positives += sum(1 for s in scores if s >= threshold)
        scored += len(scores)

    if scored == 0:
        raise EmptySampleSetError("No continuation has a '{}' score.".format(key))
    return AttributeRates(avg_max=math.fsum(maxima) / len(maxima),
                          rate=math.fsum(hits) / len(hits),
                          mean_prop=positives / scored, excluded=excluded)


def similarityBaseline(embeddings, rng, pairs=BASELINE_PAIRS):
    """
    Mean cosine similarity between random pairs of distinct embeddings.

    GIVEN:
      embeddings (np.ndarray) -- (N, d) unit embeddings, N >= 2
      rng (np.random.Generator) -- random stream
      pairs (int) -- number of pairs

    RETURN:
      ____ (float) -- baseline similarity
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] < 2:
        raise EmptySampleSetError("A similarity baseline needs at least two embeddings.")
    first = rng.integers(0, embeddings.shape[0], size=pairs)
    offset = rng.integers(1, embeddings.shape[0], size=pairs)
    second = (first + offset) % embeddings.shape[0]
    return math.fsum(cosine(embeddings[i], embeddings[j]) for i, j in zip(first, second)) / pairs


def rescaleSimilarity(value, baseline):
    return (value - baseline) / (1.0 - baseline)


def embeddingSimilarity(generation_set, proposals, embedder, baseline=None):
    """
    Mean cosine similarity between each re-embedded continuation and the proposal it was
    decoded from; with a baseline, rescaled as (cos - base) / (1 - base).

    GIVEN:
      generation_set (GenerationSet) -- the generations
      proposals (np.ndarray) -- (N, d) proposals aligned with generation_set.records
      embedder (Embedder) -- the semantic embedder
      baseline (float) -- optional random-pair baseline

    RETURN:
      ____ (float) -- mean (rescaled) similarity
    """
    proposals = np.asarray(proposals, dtype=np.float64)
    if proposals.ndim != 2 or proposals.shape[0] < len(generation_set):
        raise MissingProposalError("{} continuations but {} proposals.".format(
            len(generation_set), 0 if proposals.ndim != 2 else proposals.shape[0]))
    if len(generation_set) == 0:
        raise EmptySampleSetError("No continuations to compare.")
    sims = [cosine(embed(embedder, record.tokens), proposals[i])
            for i, record in enumerate(generation_set.records)]
    mean = math.fsum(sims) / len(sims)
    return mean if baseline is None else rescaleSimilarity(mean, baseline)


def _oracleStats(args):
    """
    Exact perplexity and attribute score of each continuation of one prompt.
    """
    prefix, continuations, key = args
    grammar = _WORKER_STATE["grammar"]
    attribute, value = splitAttributeKey(key)
    perplexities, scores = list(), list()
    for tokens in continuations:
        perplexities.append(truePerplexity(grammar, tokens, prefix))
        if attribute in grammar.attributes:
            scores.append(attributeScores(grammar, tokens, attribute)[value])
        else:
            scores.append(None)
    return perplexities, scores


def _promptPrefix(records, prompt_id):
    """
    Corpus prefix of a prompt whose id is a corpus line index, or None.
    """
    if records is None:
        return None
    try:
        index = int(prompt_id)
    except ValueError:
        return None
    if 0 <= index < len(records):
        return records[index].prefix
    return None


def evaluate(generation_set, seed, grammar=None, records=None, proposals=None, embedder=None,
             key=DEFAULT_ATTRIBUTE_KEY, threshold=0.5, num_procs=1):
    """
    Every metric the inputs allow, in report order.

    GIVEN:
      generation_set (GenerationSet) -- the generations
      seed (int) -- seed for the similarity baseline's pair draws
      grammar (ToyGrammar) -- optional oracle for perplexity and missing attribute scores
      records (list) -- optional corpus records; prompt ids index into them
      proposals (np.ndarray) -- optional (N, d) proposals aligned with the generations
      embedder (Embedder) -- required with proposals
      key (str) -- 'attribute:value' score key
      threshold (float) -- attribute positive threshold
      num_procs (int) -- worker processes for per-prompt statistics

    RETURN:
      ____ (OrderedDict) -- metric name -> value
    """
    if len(generation_set) == 0:
        raise EmptySampleSetError("The generation set is empty.")
    metrics = OrderedDict()
    metrics["div"] = divMetric(generation_set.continuations())
    metrics["dist_3"] = distN(generation_set, 3, num_procs)

    oracle_scores = dict()
    perplexities = list()
    if grammar is not None:
        prompts = generation_set.prompts()
        items = [(_promptPrefix(records, prompt_id), [r.tokens for r in prompt_records], key)
                 for prompt_id, prompt_records in prompts.items()]
        results = _mapPrompts(_oracleStats, items, num_procs, grammar)
        for prompt_records, (ppl, scores) in zip(prompts.values(), results):
            perplexities.extend(ppl)
            for record, score in zip(prompt_records, scores):
                oracle_scores[id(record)] = score

    has_scores = any(key in record.scores for record in generation_set.records)
    if has_scores or grammar is not None:
        # Stored scores win; the grammar oracle fills the gaps.
        scored = GenerationSet()
        for record in generation_set.records:
            scores = OrderedDict(record.scores)
            if key not in scores and oracle_scores.get(id(record)) is not None:
                scores[key] = oracle_scores[id(record)]
            scored.add(record.prompt_id, record.tokens, scores)
        rates = attributeRates(scored, key, threshold)
        metrics["avg_max"] = rates.avg_max
        metrics["rate"] = rates.rate
        metrics["mean_prop"] = rates.mean_prop
        metrics["excluded"] = rates.excluded

    if proposals is not None and embedder is not None:
        metrics["similarity"] = embeddingSimilarity(generation_set, proposals, embedder)
        if records is not None and len(records) >= 2:
            rng = np.random.default_rng(seed)
            base = similarityBaseline(embedMany(embedder, [r.continuation for r in records]), rng)
            metrics["similarity_rescaled"] = rescaleSimilarity(metrics["similarity"], base)

    if len(perplexities) > 0:
        metrics["perplexity"] = math.fsum(perplexities) / len(perplexities)

    return metrics


def reportLines(metrics, config=None):
    """
    'name<TAB>value' per metric, then 'config.<key><TAB>value' per resolved config key.
    """
    lines = ["{}\t{}".format(name, formatFloat(value)) for name, value in metrics.items()]
    if config is not None:
        lines += ["config.{}\t{}".format(key, value) for key, value in config.items()]
    return lines


def writeReport(filepath, metrics, config=None):
    writeText(filepath, "\n".join(reportLines(metrics, config)) + "\n")


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
