#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import argparse
import multiprocessing as mproc
import os
import sys


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
import torch

from src.classifier import evaluateClassifier, fit, loadClassifier, saveClassifier
from src.config import loadConfig, printConfig, CHOICES
from src.decoder import generate, loadDecoder, saveDecoder, trainDecoder
from src.denoiser import loadDenoiser, saveDenoiser, trainDenoiser
from src.embedder import embed, embedderFromConfig, embedMany
from src.grammar import allAttributeScores, genCorpus, grammarFromConfig, loadCorpus, \
    loadGrammar, saveCorpus, saveGrammar
from src.helpers import canonicalize, deriveSeed, doesPathExist, DGLMError, getFilenames, \
    numpyGenerator, torchGenerator
from src.metrics import evaluate, GenerationSet, loadGenerations, reportLines, \
    writeGenerations, writeReport
from src.sampler import guidanceFromConfig, GuidanceTerm, LearnedDenoiser, sample
from src.schedules import scheduleFromConfig
from src.verify import verifyOracle


#### GLOBALS #######################################################################################
ASSERT_NOT_EXIST = "The provided {}={} does not exist."
FIXTURE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")
PROPOSALS_SUFFIX = ".proposals.npy"
CLASSIFIER_HELDOUT = 0.1


#### FUNCTIONS #####################################################################################
def _loadPipeline(args, config):
    """
    Canonicalize and load the corpus and grammar named by args, plus the embedder over the
    grammar's vocabulary.
    """
    args.corpus_file = canonicalize(args.corpus_file)
    args.grammar_file = canonicalize(args.grammar_file)
    assert doesPathExist(args.corpus_file), ASSERT_NOT_EXIST.format("corpus_file", args.corpus_file)
    assert doesPathExist(args.grammar_file), ASSERT_NOT_EXIST.format("grammar_file",
                                                                     args.grammar_file)

    records = loadCorpus(args.corpus_file)
    grammar = loadGrammar(args.grammar_file)
    assert len(records) > 0, "The corpus_file={} has no records.".format(args.corpus_file)
    return records, grammar, embedderFromConfig(config, grammar.vocabulary)


def genCorpusCommand(args, config):
    """
    Build the toy grammar from the grammar.* keys, draw a corpus from it, and save both.
    """
    # Canonicalize filepaths
    args.corpus_file = canonicalize(args.corpus_file)
    args.grammar_file = canonicalize(args.grammar_file)

    # Check assertions
    size = config["corpus.size"] if args.size is None else args.size
    assert size > 0, "Argument 'size'={} cannot be less than 1.".format(size)

    print("Generating corpus...")
    grammar = grammarFromConfig(config)
    records = genCorpus(grammar, size, numpyGenerator(deriveSeed(config["train.seed"], 10)))
    saveGrammar(grammar, args.grammar_file)
    saveCorpus(records, args.corpus_file)
    print("\tWrote {} records to {}".format(len(records), args.corpus_file))
    print("\tWrote grammar ({} symbols) to {}".format(len(grammar.vocabulary), args.grammar_file))


def trainDiffusionCommand(args, config):
    """
    Train the continuation denoiser on (prefix, continuation) embedding pairs from the corpus.
    """
    records, _, embedder = _loadPipeline(args, config)
    args.output_file = canonicalize(args.output_file)

    print("Training diffusion model...")
    x_cont = torch.as_tensor(embedMany(embedder, [r.continuation for r in records]))
    x_pref = torch.as_tensor(embedMany(embedder, [r.prefix for r in records]))
    model, history = trainDenoiser(x_cont, x_pref, config)
    saveDenoiser(model, args.output_file)
    if len(history) > 0:
        step, cond, uncond = history[-1]
        print("\tFinal held-out loss at step {}: cond={:.5f} uncond={:.5f}".format(
            step, cond, uncond))
    print("\tWrote {}".format(args.output_file))


def trainDecoderCommand(args, config):
    """
    Train the decoder and prompt generator (or the prefix-only baseline) on the corpus.
    """
    records, _, embedder = _loadPipeline(args, config)
    args.output_file = canonicalize(args.output_file)

    print("Training decoder...")
    decoder, prompt_gen, vocab = trainDecoder(records, embedder, config,
                                              prompt_tokens=0 if args.baseline else None)
    saveDecoder(args.output_file, decoder, prompt_gen, vocab, config)
    print("\tWrote {}".format(args.output_file))


def trainClassifierCommand(args, config):
    """
    Fit a linear attribute classifier on continuation embeddings, report held-out accuracy and
    AUROC, then save it.
    """
    records, grammar, embedder = _loadPipeline(args, config)
    args.output_file = canonicalize(args.output_file)

    # Check assertions
    assert args.attribute in grammar.attributes, \
        "Argument 'attribute'={} is not one of {}.".format(args.attribute,
                                                          list(grammar.attributes.keys()))
    assert args.l2 >= 0, "Argument 'l2'={} cannot be negative.".format(args.l2)

    print("Training {} classifier...".format(args.attribute))
    X = embedMany(embedder, [r.continuation for r in records])
    y = [r.attributes[args.attribute] for r in records]
    order = numpyGenerator(deriveSeed(config["train.seed"], 40)).permutation(len(records))
    num_heldout = int(CLASSIFIER_HELDOUT * len(records))
    heldout, train = order[:num_heldout], order[num_heldout:]

    clf = fit(X[train], [y[i] for i in train], l2=args.l2, balanced=args.balanced,
              class_names=grammar.attributes[args.attribute], attribute=args.attribute)
    if num_heldout > 0:
        accuracy, auc = evaluateClassifier(clf, X[heldout], [y[i] for i in heldout])
        print("\tHeld-out accuracy={:.4f} AUROC={:.4f} ({} examples)".format(
            accuracy, auc, num_heldout))
    saveClassifier(clf, args.output_file)
    print("\tWrote {}".format(args.output_file))


def _parseTarget(text):
    """
    Split a --target value NAME[:WEIGHT] into the class name and its loss weight (default 1).
    """
    if ":" not in text:
        return text, 1.0
    name, weight = text.rsplit(":", 1)
    try:
        weight = float(weight)
    except ValueError:
        raise AssertionError("The weight in --target={} is not a number.".format(text))
    assert np.isfinite(weight) and weight >= 0.0, \
        "The weight in --target={} must be finite and non-negative.".format(text)
    return name, weight


def _guidanceTerms(args):
    """
    Pair every --classifier with its --target, in order.
    """
    classifiers = args.classifier or list()
    targets = args.target or list()
    assert len(classifiers) == len(targets), \
        "Every --classifier needs one --target ({} classifiers, {} targets).".format(
            len(classifiers), len(targets))
    terms = list()
    for filepath, target in zip(classifiers, targets):
        filepath = canonicalize(filepath)
        assert doesPathExist(filepath), ASSERT_NOT_EXIST.format("classifier", filepath)
        name, weight = _parseTarget(target)
        terms.append(GuidanceTerm(loadClassifier(filepath), name, weight))
    return terms


def generateCommand(args, config):
    """
    For each prompt: draw semantic proposals (diffusion sampler or the reference continuation),
    noise them to --noise, decode, and write one generation line per continuation plus the
    aligned proposals.
    """
    records, grammar, embedder = _loadPipeline(args, config)
    args.decoder_file = canonicalize(args.decoder_file)
    args.output_file = canonicalize(args.output_file)

    # Check assertions
    assert doesPathExist(args.decoder_file), ASSERT_NOT_EXIST.format("decoder_file",
                                                                     args.decoder_file)
    assert 0 <= args.start < len(records), \
        "Argument 'start'={} is outside the corpus (0..{}).".format(args.start, len(records) - 1)
    assert args.prompts > 0, "Argument 'prompts'={} cannot be less than 1.".format(args.prompts)
    if args.proposal_from == "diffusion":
        assert args.denoiser is not None, "Argument '--denoiser' is required with " \
            "--proposal-from=diffusion."
        args.denoiser = canonicalize(args.denoiser)
        assert doesPathExist(args.denoiser), ASSERT_NOT_EXIST.format("denoiser", args.denoiser)

    num = config["generate.num"] if args.num is None else args.num
    noise = config["generate.noise"] if args.noise is None else args.noise
    max_tokens = config["generate.max_tokens"] if args.max_tokens is None else args.max_tokens
    assert num > 0, "Argument 'num'={} cannot be less than 1.".format(num)
    assert 0.0 <= noise <= 1.0, "Argument 'noise'={} must lie in [0, 1].".format(noise)

    decoder, prompt_gen, vocab = loadDecoder(args.decoder_file)
    aug_schedule = scheduleFromConfig(config, "augment")
    terms = _guidanceTerms(args)
    if args.proposal_from == "diffusion":
        denoiser = LearnedDenoiser(loadDenoiser(args.denoiser))
        schedule = scheduleFromConfig(config)
        cfg = guidanceFromConfig(config, cfg_weight=args.cfg_w, guidance_scale=args.guidance_s,
                                 mc_samples=args.mc_n, steps=args.steps, mc_form=args.mc_form,
                                 jacobian=args.jacobian)

    print("Generating...")
    generation_set = GenerationSet()
    proposals = list()
    prompt_ids = range(args.start, min(args.start + args.prompts, len(records)))
    for prompt_id in prompt_ids:
        record = records[prompt_id]
        generator = torchGenerator(deriveSeed(config["train.seed"], prompt_id))
        if args.proposal_from == "diffusion":
            x_pref = torch.as_tensor(embed(embedder, record.prefix))
            batch = sample(denoiser, x_pref, terms, cfg, generator, schedule, num=num).numpy()
        else:
            batch = np.tile(embed(embedder, record.continuation), (num, 1))

        for proposal in batch:
            tokens = generate(decoder, prompt_gen, vocab, record.prefix, proposal, generator,
                              aug_schedule, noise_var=noise, max_tokens=max_tokens)
            if len(tokens) == 0:
                print("WARNING: prompt {} produced an empty continuation; skipped.".format(
                    prompt_id))
                continue
            generation_set.add(prompt_id, tokens, allAttributeScores(grammar, tokens))
            proposals.append(proposal)
        print("\tPrompt {}: {} continuations".format(prompt_id, num))

    writeGenerations(generation_set, args.output_file)
    np.save(args.output_file + PROPOSALS_SUFFIX, np.asarray(proposals, dtype=np.float64))
    print("\tWrote {} continuations to {}".format(len(generation_set), args.output_file))


def evalCommand(args, config):
    """
    Compute the metrics report for a generation file.
    """
    # Canonicalize filepaths
    args.generation_file = canonicalize(args.generation_file)
    args.report_file = canonicalize(args.report_file)

    # Check assertions
    assert doesPathExist(args.generation_file), ASSERT_NOT_EXIST.format("generation_file",
                                                                        args.generation_file)
    assert args.num_procs <= mproc.cpu_count(), \
        "Argument 'num_procs' cannot be greater than maximum number of CPUs: {}.".format(
            mproc.cpu_count())
    assert (args.corpus is None) == (args.grammar is None), \
        "Arguments '--corpus' and '--grammar' must be given together."
    assert not args.reference or args.corpus is not None, \
        "Argument '--reference' needs '--corpus' and '--grammar'."

    if args.num_procs == 0:
        args.num_procs = mproc.cpu_count()

    generation_set = loadGenerations(args.generation_file)
    records, grammar, embedder, proposals = None, None, None, None
    if args.corpus is not None:
        args.corpus_file, args.grammar_file = args.corpus, args.grammar
        records, grammar, embedder = _loadPipeline(args, config)
        proposal_file = args.generation_file + PROPOSALS_SUFFIX
        if doesPathExist(proposal_file):
            proposals = np.load(proposal_file)

    if args.reference:
        # The corpus's own continuations for the same prompts, scored against themselves.
        reference = GenerationSet()
        for prompt_id in generation_set.prompts():
            assert prompt_id.isdigit() and int(prompt_id) < len(records), \
                "Prompt id {} is not a corpus index.".format(prompt_id)
            reference.add(prompt_id, records[int(prompt_id)].continuation)
        generation_set = reference
        proposals = embedMany(embedder, generation_set.continuations())

    print("Evaluating {} continuations...".format(len(generation_set)))
    metrics = evaluate(generation_set, deriveSeed(config["train.seed"], 30), grammar=grammar,
                       records=records, proposals=proposals, embedder=embedder,
                       key=args.attribute_key, threshold=config["eval.threshold"],
                       num_procs=args.num_procs)
    writeReport(args.report_file, metrics, config)
    for line in reportLines(metrics):
        print("\t{}".format(line))
    print("\tWrote {}".format(args.report_file))


def verifyOracleCommand(args, config):
    """
    Run the exact-oracle acceptance suite on mixture fixtures.
    """
    fixtures = args.fixtures or [os.path.join(FIXTURE_DIR, f) for f in getFilenames(FIXTURE_DIR)
                                  if f.endswith(".gmm")]
    fixtures = [canonicalize(f) for f in fixtures]
    assert len(fixtures) > 0, "No fixtures found in {}.".format(FIXTURE_DIR)
    for fixture in fixtures:
        assert doesPathExist(fixture), ASSERT_NOT_EXIST.format("fixture", fixture)
    assert args.samples > 0, "Argument 'samples'={} cannot be less than 1.".format(args.samples)

    passed = verifyOracle(fixtures, config, samples=args.samples, seed=config["train.seed"])
    return 0 if passed else 1


def buildParser():
    """
    The argparse parser with one sub-parser per command.
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", type=str, default=None, help="The path to a key=value config file. Keys not "
        "in the file keep their defaults."
    )
    common.add_argument(
        "--set", type=str, action="append", default=list(), metavar="KEY=VALUE",
        help="Override one config key. May be repeated; applied after --config."
    )
    common.add_argument(
        "--seed", type=int, default=None, help="Run seed. Takes precedence over the SEED "
        "environment variable and over train.seed."
    )

    parser = argparse.ArgumentParser(
        description="Diffusion-guided language modeling on a toy grammar: train a continuation "
        "diffusion model, a soft-prompt decoder and attribute classifiers, generate with "
        "guidance, and evaluate."
    )
    command_parsers = parser.add_subparsers(
        help="Available commands."
    )

    #### GEN-CORPUS COMMAND
    corpus_parser = command_parsers.add_parser(
        "gen-corpus", parents=[common], help="Build the toy grammar and draw an attribute-labeled "
        "corpus from it."
    )
    corpus_parser.add_argument(
        "corpus_file", type=str, help="The path to write the corpus to. Relative paths will be "
        "canonicalized."
    )
    corpus_parser.add_argument(
        "grammar_file", type=str, help="The path to write the grammar to. Relative paths will be "
        "canonicalized."
    )
    corpus_parser.add_argument(
        "--size", type=int, default=None, help="Number of records. Defaults to corpus.size."
    )
    corpus_parser.set_defaults(func=genCorpusCommand)

    #### TRAIN-DIFFUSION COMMAND
    diffusion_parser = command_parsers.add_parser(
        "train-diffusion", parents=[common], help="Train the continuation-embedding denoiser."
    )
    diffusion_parser.add_argument("corpus_file", type=str, help="The corpus to train on.")
    diffusion_parser.add_argument("grammar_file", type=str, help="The corpus's grammar.")
    diffusion_parser.add_argument("output_file", type=str, help="Where to save the denoiser.")
    diffusion_parser.set_defaults(func=trainDiffusionCommand)

    #### TRAIN-DECODER COMMAND
    decoder_parser = command_parsers.add_parser(
        "train-decoder", parents=[common], help="Train the decoder and prompt generator."
    )
    decoder_parser.add_argument("corpus_file", type=str, help="The corpus to train on.")
    decoder_parser.add_argument("grammar_file", type=str, help="The corpus's grammar.")
    decoder_parser.add_argument("output_file", type=str, help="Where to save the decoder.")
    decoder_parser.add_argument(
        "--baseline", default=False, action="store_true", help="If included, train the "
        "prefix-only baseline decoder with no soft prompt."
    )
    decoder_parser.set_defaults(func=trainDecoderCommand)

    #### TRAIN-CLASSIFIER COMMAND
    classifier_parser = command_parsers.add_parser(
        "train-classifier", parents=[common], help="Fit a linear attribute classifier on "
        "continuation embeddings."
    )
    classifier_parser.add_argument("corpus_file", type=str, help="The corpus to train on.")
    classifier_parser.add_argument("grammar_file", type=str, help="The corpus's grammar.")
    classifier_parser.add_argument("output_file", type=str, help="Where to save the classifier.")
    classifier_parser.add_argument(
        "--attribute", type=str, default="sentiment", help="The attribute to predict."
    )
    classifier_parser.add_argument(
        "--l2", type=float, default=1e-3, help="L2 penalty on the weights."
    )
    classifier_parser.add_argument(
        "--balanced", default=False, action="store_true", help="If included, reweight examples "
        "by inverse class frequency."
    )
    classifier_parser.set_defaults(func=trainClassifierCommand)

    #### GENERATE COMMAND
    generate_parser = command_parsers.add_parser(
        "generate", parents=[common], help="Generate continuations for corpus prompts."
    )
    generate_parser.add_argument("corpus_file", type=str, help="The corpus holding the prompts.")
    generate_parser.add_argument("grammar_file", type=str, help="The corpus's grammar.")
    generate_parser.add_argument("decoder_file", type=str, help="A trained decoder.")
    generate_parser.add_argument(
        "output_file", type=str, help="Where to write the generation file. Proposals are written "
        "next to it with a '.proposals.npy' suffix."
    )
    generate_parser.add_argument(
        "--denoiser", type=str, default=None, help="A trained denoiser. Required with "
        "--proposal-from=diffusion."
    )
    generate_parser.add_argument(
        "--proposal-from", dest="proposal_from", type=str, default="diffusion",
        choices=["diffusion", "reference"], help="Sample proposals with the diffusion model, or "
        "use the embedding of the prompt's true continuation."
    )
    generate_parser.add_argument(
        "--classifier", type=str, action="append", help="A trained classifier to guide with. May "
        "be repeated; the losses of all classifiers are summed."
    )
    generate_parser.add_argument(
        "--target", type=str, action="append", help="Target class for the classifier in the same "
        "position, as NAME or NAME:WEIGHT to scale that classifier's loss (default weight 1)."
    )
    generate_parser.add_argument("--guidance-s", dest="guidance_s", type=float, default=None,
                                 help="Classifier guidance scale s.")
    generate_parser.add_argument("--cfg-w", dest="cfg_w", type=float, default=None,
                                 help="Classifier-free guidance weight w.")
    generate_parser.add_argument("--mc-n", dest="mc_n", type=int, default=None,
                                 help="Monte-Carlo draws around the MMSE estimate.")
    generate_parser.add_argument("--steps", type=int, default=None, help="DDPM sampling steps.")
    generate_parser.add_argument("--mc-form", dest="mc_form", type=str, default=None,
                                 choices=CHOICES["guidance.mc_form"],
                                 help="Monte-Carlo aggregate form.")
    generate_parser.add_argument("--jacobian", type=str, default=None,
                                 choices=CHOICES["guidance.jacobian"],
                                 help="How the guidance gradient is pulled back to z.")
    generate_parser.add_argument("--noise", type=float, default=None,
                                 help="Proposal noise variance for decoding.")
    generate_parser.add_argument("--num", type=int, default=None,
                                 help="Continuations per prompt.")
    generate_parser.add_argument("--max-tokens", dest="max_tokens", type=int, default=None,
                                 help="Continuation length cap.")
    generate_parser.add_argument("--prompts", type=int, default=10,
                                 help="Number of prompts, taken in corpus order.")
    generate_parser.add_argument("--start", type=int, default=0,
                                 help="Corpus index of the first prompt.")
    generate_parser.set_defaults(func=generateCommand)

    #### EVAL COMMAND
    eval_parser = command_parsers.add_parser(
        "eval", parents=[common], help="Compute the metrics report for a generation file."
    )
    eval_parser.add_argument("generation_file", type=str, help="The generation file to score.")
    eval_parser.add_argument("report_file", type=str, help="Where to write the report.")
    eval_parser.add_argument(
        "--corpus", type=str, default=None, help="The corpus the prompts came from. Enables "
        "prefix-conditioned perplexity and the similarity baseline."
    )
    eval_parser.add_argument(
        "--grammar", type=str, default=None, help="The corpus's grammar. Enables oracle "
        "perplexity and attribute scores."
    )
    eval_parser.add_argument(
        "--reference", default=False, action="store_true", help="If included, score the corpus's "
        "true continuations of the same prompts instead."
    )
    eval_parser.add_argument(
        "--attribute-key", dest="attribute_key", type=str, default="sentiment:pos",
        help="The 'attribute:value' score used for avg_max, rate and mean_prop."
    )
    eval_parser.add_argument(
        "--num_procs", type=int, default=1, help="Number of processes (CPUs) to use for "
        "multiprocessing. Enter '0' to use all available CPUs."
    )
    eval_parser.set_defaults(func=evalCommand)

    #### VERIFY-ORACLE COMMAND
    verify_parser = command_parsers.add_parser(
        "verify-oracle", parents=[common], help="Run the exact Gaussian-mixture oracle checks."
    )
    verify_parser.add_argument(
        "fixtures", type=str, nargs="*", help="Mixture fixture files. Defaults to fixtures/*.gmm."
    )
    verify_parser.add_argument(
        "--samples", type=int, default=10000, help="Samples per sampling check."
    )
    verify_parser.set_defaults(func=verifyOracleCommand)

    return parser


def cliMain(argv):
    """
    Parse argv, resolve the config, and run one command.

    RETURN:
      ____ (int) -- 0 on success, 1 on a failed check or bad input, 2 on a usage error
    """
    parser = buildParser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2

    try:
        config = loadConfig(args.config, args.set, args.seed)
        printConfig(config)
        return args.func(args, config) or 0
    except (AssertionError, DGLMError, OSError, ValueError) as e:
        print("ERROR: {}".format(e), file=sys.stderr)
        return 1


#### MAIN ##########################################################################################
if __name__ == "__main__":
    sys.exit(cliMain(sys.argv[1:]))
