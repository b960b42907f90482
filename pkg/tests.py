#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import filecmp
import io
import math
import os
import shutil
import unittest
from collections import OrderedDict
import unittest.mock as mock


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
import torch
from scipy.stats import chi2_contingency

from main import _parseTarget, cliMain
from src.checkpoint import CheckpointFormatError, CheckpointShapeError, loadCheckpoint, \
    loadModulesState, saveCheckpoint, saveModules
from src.classifier import LinearAttributeClassifier, SingleClassError, UnknownClassError, \
    _objective, auroc, balancedWeights, evaluateClassifier, fit, loadClassifier, logProb, \
    lossGradX, predictProba, saveClassifier, trainingLoss
from src.config import ConfigValueError, RunConfig, UnknownConfigKeyError, loadConfig, printConfig
from src.decoder import BOS_ID, EOS_ID, IGNORE_INDEX, DecoderTrainer, DecoderVocab, \
    buildDecoder, continuationLoss, decoderLoss, decoderTrainStep, encodeRecords, \
    firstTokenCounts, generate, loadDecoder, lossMask, saveDecoder, softPrompt, streamTargets, \
    trainDecoder
from src.denoiser import buildDenoiser, denoiserLoss, DenoiserTrainer, heldoutLosses, \
    loadDenoiser, predictV, saveDenoiser, trainDenoiser, trainStep
from src.diffusion import KindMismatchError, LatentState, Prediction, SingularityError, \
    StepOrderError, WeightingFn, convert, dsmVLoss, forwardDiffuse, forwardDiffuseLambda, \
    latentAt, posteriorStepParams, weight
from src.embedder import EmptyTokensError, Embedder, cosine, embed, embedMany
from src.gmm import GMMSpecError, LabeledGMM, classWeights, gmmBayesClassifier, \
    gmmClassPosterior, gmmLogDensity, gmmSample, gmmScore, loadGMMSpec
from src.grammar import CorpusFormatError, GrammarSpecError, ToyGrammar, UnknownSymbolError, \
    allAttributeScores, attributeScores, buildGrammar, genCorpus, loadCorpus, loadGrammar, \
    saveCorpus, saveGrammar, sequenceLogProb, truePerplexity
from src.helpers import DimensionMismatchError, canonicalize, checkDim, deriveSeed, \
    doesPathExist, formatFloat, getFilenames, numpyGenerator, torchGenerator, writeText
from src.layers import AdaptiveRMSNorm, RMSNorm, SelfAttention, TimeFeatures, countParameters, \
    sinusoidalFeatures
from src.metrics import EmptySampleSetError, GenerationFormatError, GenerationSet, \
    MissingProposalError, attributeRates, distN, divMetric, embeddingSimilarity, evaluate, \
    grammarOracle, loadGenerations, reportLines, rescaleSimilarity, similarityBaseline, \
    splitAttributeKey, writeGenerations, writeReport
from src.optim import buildOptimizer, optimizerStep, warmupCosine
from src.sampler import GuidanceConfig, GuidanceTerm, LearnedDenoiser, OracleDenoiser, cfgBlend, \
    dpsEstimate, guidanceFromConfig, guidanceObjective, mcGuidanceGradient, sample
from src.schedules import Schedule, ScheduleDomainError, adaptiveSample, adaptiveUpdate, \
    alphaSigma, alphaSigmaOfLambda, binProbabilities, lambdaOf, lambdaOfNoiseVar, \
    newAdaptiveState, timeOfLambda
from src.verify import checkScore, conditionalClassWeights, totalVariation, verifyFixture, \
    verifyOracle


#### GLOBALS #######################################################################################
CWD = os.path.dirname(os.path.realpath(__file__))
DATA_DIR = os.path.join(CWD, "test_data/")
TEST_FILES = os.path.join(CWD, "test_files/")
FIXTURES = os.path.join(CWD, "fixtures/")
TINY_CONFIG = os.path.join(TEST_FILES, "tiny_config.txt")
ACCEPTANCE_CONFIG = os.path.join(TEST_FILES, "acceptance_config.txt")
SLOW = os.environ.get("DGLM_SLOW", "") == "1"


#### HELPERS #######################################################################################
def _tinyConfig(overrides=None):
    return loadConfig(TINY_CONFIG, overrides, seed=0)


def _smallGrammar():
    return buildGrammar(seed=7, lexicon_size=4, fillers=8, prefix_len=4, cont_len=6)


def _chainGrammar(vocabulary, start, trans):
    return ToyGrammar(vocabulary, OrderedDict(), [OrderedDict()], [1.0], [start], [trans])


def _finiteDifference(fn, tensor, index, step=1e-6):
    """
    Central difference of the scalar fn() with respect to tensor[index], restoring the entry.
    """
    with torch.no_grad():
        original = float(tensor[index])
        tensor[index] = original + step
        plus = float(fn())
        tensor[index] = original - step
        minus = float(fn())
        tensor[index] = original
    return (plus - minus) / (2.0 * step)


def _removeDataDir():
    try:
        shutil.rmtree(DATA_DIR)
    except FileNotFoundError:
        pass # We don't want the directory to exist, so this is fine


def _readReport(filepath):
    with open(filepath, "r", encoding="utf-8") as f:
        return OrderedDict(line.rstrip("\n").split("\t", 1) for line in f if line.strip() != "")


def _quietCli(argv):
    with mock.patch("sys.stdout", new_callable=io.StringIO), \
            mock.patch("sys.stderr", new_callable=io.StringIO):
        return cliMain(list(argv))


#### TEST CASES ####################################################################################
class TestHelpers(unittest.TestCase):
    """
    Test cases for functions in src.helpers.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        os.makedirs(DATA_DIR, exist_ok=True)


    def tearDown(self):
        """
        Necessary cleanup for these test cases.
        """
        _removeDataDir()


    def test_canonicalize(self):
        """
        Test src.helpers:canonicalize().
        """
        #### Case 1 -- simple relative path
        input_path = "src/"
        expected = os.path.join(CWD, "src")
        actual = canonicalize(input_path)
        self.assertEqual(expected, actual)

        #### Case 2 -- complex relative path
        input_path = "src/../src/"
        expected = os.path.join(CWD, "src")
        actual = canonicalize(input_path)
        self.assertEqual(expected, actual)


    def test_doesPathExist(self):
        """
        Test src.helpers:doesPathExist().
        """
        #### Case 1 -- relative path that doesn't exist
        self.assertFalse(doesPathExist("src/apples.py"))

        #### Case 2 -- absolute path that does exist
        self.assertTrue(doesPathExist(canonicalize("src/helpers.py")))


    def test_getFilenames(self):
        """
        Test src.helpers:getFilenames().
        """
        expected = ["three_component.gmm", "two_class.gmm"]
        actual = getFilenames(FIXTURES)
        self.assertListEqual(expected, actual)


    def test_writeText(self):
        """
        Test src.helpers:writeText() and overwriteFile().
        """
        filepath = os.path.join(DATA_DIR, "out.txt")

        #### Case 1 -- fresh file
        writeText(filepath, "first\n")
        with open(filepath, "r") as f:
            self.assertEqual("first\n", f.read())

        #### Case 2 -- overwrite, no temporary file left behind
        writeText(filepath, "second\n")
        with open(filepath, "r") as f:
            self.assertEqual("second\n", f.read())
        self.assertFalse(doesPathExist(filepath + ".tmp"))


    def test_formatFloat(self):
        """
        Test src.helpers:formatFloat().
        """
        self.assertEqual("0.04", formatFloat(0.04))
        self.assertEqual("0.166666666667", formatFloat(1.0 / 6.0))
        self.assertEqual("3", formatFloat(3))
        self.assertEqual("6.4e-05", formatFloat((3 / 75) * (2 / 50) * (1 / 25)))


    def test_deriveSeed(self):
        """
        Test src.helpers:deriveSeed().
        """
        #### Case 1 -- deterministic
        self.assertEqual(deriveSeed(0, 5), deriveSeed(0, 5))

        #### Case 2 -- keys and base seeds separate streams
        self.assertNotEqual(deriveSeed(0, 5), deriveSeed(0, 6))
        self.assertNotEqual(deriveSeed(0, 5), deriveSeed(1, 5))

        #### Case 3 -- fits a 63-bit seed
        for key in range(20):
            seed = deriveSeed(123, key)
            self.assertGreaterEqual(seed, 0)
            self.assertLess(seed, 2 ** 63)


    def test_generators(self):
        """
        Test src.helpers:torchGenerator() and numpyGenerator().
        """
        expected = torch.randn(5, generator=torchGenerator(9))
        actual = torch.randn(5, generator=torchGenerator(9))
        self.assertTrue(torch.equal(expected, actual))

        expected = numpyGenerator(9).random(5)
        actual = numpyGenerator(9).random(5)
        self.assertTrue(np.array_equal(expected, actual))


    def test_checkDim(self):
        """
        Test src.helpers:checkDim().
        """
        #### Case 1 -- matching trailing dimension
        checkDim("x", np.zeros((3, 4)), 4)

        #### Case 2 -- mismatch
        with self.assertRaises(DimensionMismatchError):
            checkDim("x", torch.zeros(3), 4)
        with self.assertRaises(ValueError):
            checkDim("x", torch.zeros(3), 4)


class TestConfig(unittest.TestCase):
    """
    Test cases for functions in src.config.
    """
    def test_defaults(self):
        """
        Test src.config:RunConfig defaults.
        """
        config = RunConfig()
        self.assertEqual("cosine", config["schedule.kind"])
        self.assertEqual(2.4, config["loss.scale"])
        self.assertEqual(0.2, config["sampler.v_interp"])
        self.assertEqual(1.0, config["verify.v_interp"])
        self.assertEqual(64, config["adaptive.bins"])
        self.assertEqual(32, config["guidance.mc_n"])
        self.assertEqual("paper_literal", config["guidance.mc_form"])
        self.assertEqual(8, config["decoder.prompt_tokens"])
        with self.assertRaises(UnknownConfigKeyError):
            config["train.nope"]


    def test_loadConfig(self):
        """
        Test src.config:loadConfig().
        """
        filepath = os.path.join(TEST_FILES, "config.txt")
        with mock.patch.dict(os.environ, {"SEED": ""}):
            #### Case 1 -- file values, comments and untouched defaults
            config = loadConfig(filepath)
            self.assertEqual("scaled_cosine", config["schedule.kind"])
            self.assertEqual(2.0, config["schedule.shift"])
            self.assertEqual("likelihood_mean", config["guidance.mc_form"])
            self.assertEqual(11, config["train.seed"])
            self.assertEqual(50, config["sampler.steps"])

            #### Case 2 -- overrides apply after the file
            config = loadConfig(filepath, ["train.seed=3", "sampler.steps = 7"])
            self.assertEqual(3, config["train.seed"])
            self.assertEqual(7, config["sampler.steps"])

            #### Case 3 -- the seed argument beats everything
            config = loadConfig(filepath, ["train.seed=3"], seed=5)
            self.assertEqual(5, config["train.seed"])

        #### Case 4 -- SEED environment variable beats the file but not the argument
        with mock.patch.dict(os.environ, {"SEED": "8"}):
            self.assertEqual(8, loadConfig(filepath)["train.seed"])
            self.assertEqual(5, loadConfig(filepath, seed=5)["train.seed"])


    def test_loadConfig_errors(self):
        """
        Test src.config:loadConfig() on bad input.
        """
        #### Case 1 -- unknown key
        with self.assertRaises(UnknownConfigKeyError):
            loadConfig(os.path.join(TEST_FILES, "bad_config.txt"), seed=0)

        #### Case 2 -- value of the wrong type
        with self.assertRaises(ConfigValueError):
            loadConfig(os.path.join(TEST_FILES, "bad_value_config.txt"), seed=0)

        #### Case 3 -- value outside the allowed choices
        with self.assertRaises(ConfigValueError):
            loadConfig(None, ["schedule.kind=linear"], seed=0)

        #### Case 4 -- a float where an int is required
        with self.assertRaises(ConfigValueError):
            loadConfig(None, ["train.steps=2.5"], seed=0)

        #### Case 5 -- override without '='
        with self.assertRaises(ConfigValueError):
            loadConfig(None, ["train.steps"], seed=0)


    def test_printConfig(self):
        """
        Test src.config:printConfig().
        """
        config = RunConfig()
        with mock.patch("builtins.print") as mocked:
            printConfig(config)
        lines = [c.args[0] for c in mocked.call_args_list]
        self.assertEqual("Resolved config:", lines[0])
        self.assertEqual("\tadaptive.bins=64", lines[1])
        self.assertEqual(len(config.lines()) + 1, len(lines))
        self.assertIn("\ttrain.seed=0", lines)


class TestSchedules(unittest.TestCase):
    """
    Test cases for functions in src.schedules.
    """
    def test_lambdaOf(self):
        """
        Test src.schedules:lambdaOf().
        """
        #### Case 1 -- cosine schedule crosses lambda = 0 at t = 1/2
        self.assertAlmostEqual(0.0, lambdaOf(Schedule(), 0.5), places=12)

        #### Case 2 -- a positive shift lowers lambda by 2 ln(shift)
        schedule = Schedule(kind="scaled_cosine", shift=3.0)
        self.assertAlmostEqual(-2.0 * math.log(3.0), lambdaOf(schedule, 0.5), places=12)

        #### Case 3 -- a negative shift raises it by 2 ln|shift|
        schedule = Schedule(kind="scaled_cosine", shift=-3.0)
        self.assertAlmostEqual(2.0 * math.log(3.0), lambdaOf(schedule, 0.5), places=12)

        #### Case 4 -- scalars give floats, arrays give arrays
        self.assertIsInstance(lambdaOf(Schedule(), 0.25), float)
        self.assertEqual((3,), lambdaOf(Schedule(), np.array([0.1, 0.5, 0.9])).shape)


    def test_lambdaOf_clamp(self):
        """
        Test src.schedules:lambdaOf() at the ends of the time range.
        """
        schedule = Schedule()
        self.assertEqual(15.0, lambdaOf(schedule, 0.0))
        self.assertEqual(-15.0, lambdaOf(schedule, 1.0))

        lam = lambdaOf(schedule, np.linspace(0.0, 1.0, 101))
        self.assertTrue(np.all(np.diff(lam) <= 0.0))
        self.assertTrue(np.all(lam <= 15.0) and np.all(lam >= -15.0))


    def test_variancePreserving(self):
        """
        Test src.schedules:alphaSigma() keeps alpha^2 + sigma^2 = 1.
        """
        ts = np.linspace(0.0, 1.0, 201)
        for schedule in [Schedule(), Schedule(kind="scaled_cosine", shift=3.0)]:
            alpha, sigma = alphaSigma(schedule, ts)
            self.assertTrue(np.allclose(alpha ** 2 + sigma ** 2, 1.0, atol=1e-12))
            self.assertTrue(np.all(alpha > 0.0) and np.all(sigma > 0.0))


    def test_domainErrors(self):
        """
        Test src.schedules domain checks.
        """
        with self.assertRaises(ScheduleDomainError):
            lambdaOf(Schedule(), 1.5)
        with self.assertRaises(ScheduleDomainError):
            lambdaOf(Schedule(), -0.1)
        with self.assertRaises(ScheduleDomainError):
            Schedule(kind="linear")
        with self.assertRaises(ScheduleDomainError):
            Schedule(lambda_min=1.0, lambda_max=0.0)
        with self.assertRaises(ScheduleDomainError):
            Schedule(kind="scaled_cosine", shift=0.0)


    def test_timeOfLambda(self):
        """
        Test src.schedules:timeOfLambda() inverts lambdaOf() inside the clamp range.
        """
        ts = np.linspace(0.05, 0.95, 19)
        for schedule in [Schedule(), Schedule(kind="scaled_cosine", shift=3.0)]:
            actual = timeOfLambda(schedule, lambdaOf(schedule, ts))
            self.assertTrue(np.allclose(ts, actual, atol=1e-10))


    def test_lambdaOfNoiseVar(self):
        """
        Test src.schedules:lambdaOfNoiseVar().
        """
        schedule = Schedule()

        #### Case 1 -- sigma^2 = 0.05
        lam = lambdaOfNoiseVar(schedule, 0.05)
        self.assertAlmostEqual(math.log(19.0), lam, places=12)
        _, sigma = alphaSigmaOfLambda(lam)
        self.assertAlmostEqual(0.05, sigma ** 2, places=12)

        #### Case 2 -- endpoints land on the clamp
        self.assertEqual(15.0, lambdaOfNoiseVar(schedule, 0.0))
        self.assertEqual(-15.0, lambdaOfNoiseVar(schedule, 1.0))

        #### Case 3 -- outside [0, 1]
        with self.assertRaises(ScheduleDomainError):
            lambdaOfNoiseVar(schedule, 1.5)


    def test_adaptiveSampler(self):
        """
        Test src.schedules:adaptiveSample() and adaptiveUpdate().
        """
        #### Case 1 -- a fresh sampler is uniform with unit weights
        state = newAdaptiveState()
        self.assertTrue(np.allclose(binProbabilities(state), 1.0 / 64.0))
        lam, importance = adaptiveSample(state, numpyGenerator(0), size=1000)
        self.assertTrue(np.allclose(importance, 1.0, atol=1e-12))
        self.assertTrue(np.all(lam >= -15.0) and np.all(lam <= 15.0))

        #### Case 2 -- EMA update of the bin holding lambda = 0.1
        adaptiveUpdate(state, 0.1, 5.0)
        self.assertAlmostEqual(1.04, state.ema_loss[32], places=12)
        self.assertEqual(1.0, state.ema_loss[31])

        #### Case 3 -- importance weights stay unbiased for a skewed density
        state = newAdaptiveState()
        state.ema_loss[10] = 200.0
        _, importance = adaptiveSample(state, numpyGenerator(1), size=200000)
        self.assertLess(abs(float(np.mean(importance)) - 1.0), 0.03)

        #### Case 4 -- the floor keeps every bin alive
        state = newAdaptiveState()
        state.ema_loss[:] = 0.0
        state.ema_loss[0] = 1.0
        self.assertTrue(np.all(binProbabilities(state) > 0.0))

        #### Case 5 -- scalar draw
        lam, importance = adaptiveSample(newAdaptiveState(), numpyGenerator(2))
        self.assertIsInstance(lam, float)
        self.assertIsInstance(importance, float)

        #### Case 6 -- bad input
        with self.assertRaises(ScheduleDomainError):
            adaptiveUpdate(newAdaptiveState(), 0.0, -1.0)
        with self.assertRaises(ScheduleDomainError):
            newAdaptiveState(decay=1.0)


class TestDiffusionCore(unittest.TestCase):
    """
    Test cases for functions in src.diffusion.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        generator = torchGenerator(0)
        self.lam = np.linspace(-10.0, 10.0, 16)
        self.x = torch.randn(16, 4, generator=generator, dtype=torch.float64)
        self.eps = torch.randn(16, 4, generator=generator, dtype=torch.float64)
        self.latent = forwardDiffuseLambda(self.x, self.lam, self.eps)


    def test_forwardDiffuse(self):
        """
        Test src.diffusion:forwardDiffuse().
        """
        #### Case 1 -- at t = 1/2 the cosine schedule has alpha = sigma = sqrt(1/2)
        x = torch.tensor([1.0, -2.0], dtype=torch.float64)
        eps = torch.tensor([0.5, 0.5], dtype=torch.float64)
        latent = forwardDiffuse(x, 0.5, eps, Schedule())
        expected = math.sqrt(0.5) * (x + eps)
        self.assertTrue(torch.allclose(expected, latent.z, atol=1e-12))
        self.assertEqual(0.5, latent.t)

        #### Case 2 -- mismatched shapes
        with self.assertRaises(DimensionMismatchError):
            forwardDiffuse(x, 0.5, torch.zeros(3, dtype=torch.float64), Schedule())


    def test_convert_roundTrip(self):
        """
        Test src.diffusion:convert() through v -> x0 -> eps -> score -> v.
        """
        v = torch.randn(16, 4, generator=torchGenerator(1), dtype=torch.float64)
        pred = Prediction(kind="v", value=v)
        for kind in ["x0", "eps", "score", "v"]:
            pred = convert(pred, self.latent, kind)
            self.assertEqual(kind, pred.kind)
        self.assertTrue(torch.allclose(v, pred.value, atol=1e-9))


    def test_convert_identities(self):
        """
        Test src.diffusion:convert() against v = alpha eps - sigma x.
        """
        alpha, sigma = alphaSigmaOfLambda(self.lam)
        alpha = torch.as_tensor(alpha)[:, None]
        sigma = torch.as_tensor(sigma)[:, None]
        v_true = Prediction(kind="v", value=alpha * self.eps - sigma * self.x)

        actual = convert(v_true, self.latent, "x0").value
        self.assertTrue(torch.allclose(self.x, actual, atol=1e-10))
        actual = convert(v_true, self.latent, "eps").value
        self.assertTrue(torch.allclose(self.eps, actual, atol=1e-10))
        actual = convert(v_true, self.latent, "score").value
        self.assertTrue(torch.allclose(-self.eps / sigma, actual, atol=1e-8))


    def test_convert_errors(self):
        """
        Test src.diffusion:convert() at the singular ends and on bad kinds.
        """
        z = torch.ones(3, dtype=torch.float64)

        #### Case 1 -- alpha = 0
        latent = LatentState(z=z, t=1.0, lam=float("-inf"))
        with self.assertRaises(SingularityError):
            convert(Prediction(kind="eps", value=z), latent, "x0")

        #### Case 2 -- sigma = 0
        latent = LatentState(z=z, t=0.0, lam=float("inf"))
        with self.assertRaises(SingularityError):
            convert(Prediction(kind="x0", value=z), latent, "eps")

        #### Case 3 -- unknown kinds
        with self.assertRaises(KindMismatchError):
            Prediction(kind="logits", value=z)
        with self.assertRaises(KindMismatchError):
            convert(Prediction(kind="v", value=z), LatentState(z, 0.5, 0.0), "noise")

        #### Case 4 -- shape mismatch
        with self.assertRaises(DimensionMismatchError):
            convert(Prediction(kind="v", value=torch.ones(4, dtype=torch.float64)),
                    LatentState(z, 0.5, 0.0), "x0")


    def test_weight(self):
        """
        Test src.diffusion:weight().
        """
        hybrid = WeightingFn()
        lognormal = WeightingFn(kind="lognormal")
        self.assertEqual(1.0, weight(hybrid, 0.0))
        self.assertEqual(1.0, weight(lognormal, 0.0))
        self.assertAlmostEqual(0.5, weight(hybrid, -2.4), places=12)
        self.assertAlmostEqual(math.exp(-0.5), weight(hybrid, 2.4), places=12)
        self.assertAlmostEqual(math.exp(-0.5), weight(lognormal, -2.4), places=12)
        self.assertEqual((3,), weight(hybrid, np.array([-1.0, 0.0, 1.0])).shape)
        with self.assertRaises(KindMismatchError):
            WeightingFn(kind="uniform")


    def test_dsmVLoss(self):
        """
        Test src.diffusion:dsmVLoss().
        """
        alpha, sigma = alphaSigmaOfLambda(self.lam)
        alpha_col = torch.as_tensor(alpha)[:, None]
        v_true = alpha_col * self.eps - torch.as_tensor(sigma)[:, None] * self.x

        #### Case 1 -- the true velocity has zero loss
        loss = dsmVLoss(Prediction(kind="v", value=v_true), self.x, self.eps, self.latent,
                        WeightingFn())
        self.assertEqual((16,), tuple(loss.shape))
        self.assertTrue(torch.allclose(torch.zeros(16, dtype=torch.float64), loss, atol=1e-15))

        #### Case 2 -- unit error in every dimension at lambda = 0
        x = torch.zeros(4, dtype=torch.float64)
        eps = torch.zeros(4, dtype=torch.float64)
        latent = forwardDiffuseLambda(x, 0.0, eps)
        loss = dsmVLoss(Prediction(kind="v", value=torch.ones(4, dtype=torch.float64)), x, eps,
                        latent, WeightingFn())
        self.assertAlmostEqual(4.0, float(loss), places=12)

        #### Case 3 -- wrong kind
        with self.assertRaises(KindMismatchError):
            dsmVLoss(Prediction(kind="eps", value=v_true), self.x, self.eps, self.latent,
                     WeightingFn())


    def test_posteriorStepParams(self):
        """
        Test src.diffusion:posteriorStepParams().
        """
        schedule = Schedule()
        z = torch.tensor([0.3, -1.2], dtype=torch.float64)
        x_hat = Prediction(kind="x0", value=torch.tensor([1.0, 0.5], dtype=torch.float64))
        latent = latentAt(schedule, z, 0.6)

        alpha_t, sigma_t = alphaSigma(schedule, 0.6)
        alpha_s, sigma_s = alphaSigma(schedule, 0.4)
        alpha_ts = alpha_t / alpha_s
        var_max = sigma_t ** 2 - alpha_ts ** 2 * sigma_s ** 2
        var_min = var_max * sigma_s ** 2 / sigma_t ** 2
        expected_mean = (alpha_ts * sigma_s ** 2 / sigma_t ** 2) * z \
            + (alpha_s * var_max / sigma_t ** 2) * x_hat.value

        #### Case 1 -- v = 0 is the posterior variance
        mean, step_sigma = posteriorStepParams(latent, x_hat, 0.4, 0.0, schedule)
        self.assertTrue(torch.allclose(expected_mean, mean, atol=1e-12))
        self.assertAlmostEqual(math.sqrt(var_min), step_sigma, places=12)

        #### Case 2 -- v = 1 is the forward transition variance
        _, step_sigma = posteriorStepParams(latent, x_hat, 0.4, 1.0, schedule)
        self.assertAlmostEqual(math.sqrt(var_max), step_sigma, places=12)

        #### Case 3 -- v = 0.2 interpolates in log space
        _, step_sigma = posteriorStepParams(latent, x_hat, 0.4, 0.2, schedule)
        expected = math.sqrt(var_max ** 0.2 * var_min ** 0.8)
        self.assertAlmostEqual(expected, step_sigma, places=12)

        #### Case 4 -- unit-variance data keeps unit variance at v = 1 and shrinks at v = 0.2
        one = torch.tensor([1.0], dtype=torch.float64)
        exact = Prediction(kind="x0", value=alpha_t * one)
        mean, step_sigma = posteriorStepParams(latentAt(schedule, one, 0.6), exact, 0.4, 1.0,
                                               schedule)
        self.assertAlmostEqual(1.0, float(mean[0]) ** 2 + step_sigma ** 2, places=12)
        mean, step_sigma = posteriorStepParams(latentAt(schedule, one, 0.6), exact, 0.4, 0.2,
                                               schedule)
        self.assertLess(float(mean[0]) ** 2 + step_sigma ** 2, 1.0 - 1e-3)

        #### Case 5 -- bad step order and kind
        with self.assertRaises(StepOrderError):
            posteriorStepParams(latent, x_hat, 0.7, 0.2, schedule)
        with self.assertRaises(KindMismatchError):
            posteriorStepParams(latent, Prediction(kind="v", value=z), 0.4, 0.2, schedule)


class TestGMMOracle(unittest.TestCase):
    """
    Test cases for functions in src.gmm.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        self.two_class = loadGMMSpec(os.path.join(FIXTURES, "two_class.gmm"))
        self.three = loadGMMSpec(os.path.join(FIXTURES, "three_component.gmm"))
        self.z = 2.0 * torch.randn(8, 2, generator=torchGenerator(0), dtype=torch.float64)


    def test_gmmScore_singleGaussian(self):
        """
        Test src.gmm:gmmScore() on a single unit Gaussian.
        """
        #### Case 1 -- N(0, I) stays N(0, I) under the VP process
        gmm = LabeledGMM([1.0], [[0.0, 0.0]], [[1.0, 1.0]], [0])
        for t in [0.1, 0.5, 0.9]:
            alpha, sigma = alphaSigma(Schedule(), t)
            actual = gmmScore(gmm, self.z, alpha, sigma)
            self.assertTrue(torch.allclose(-self.z, actual, atol=1e-12))

        #### Case 2 -- shifted mean
        mu = torch.tensor([1.0, -2.0], dtype=torch.float64)
        gmm = LabeledGMM([1.0], [mu.tolist()], [[1.0, 1.0]], [0])
        alpha, sigma = alphaSigma(Schedule(), 0.3)
        actual = gmmScore(gmm, self.z, alpha, sigma)
        self.assertTrue(torch.allclose(-(self.z - alpha * mu), actual, atol=1e-12))

        #### Case 3 -- single vector in, single vector out
        self.assertEqual((2,), tuple(gmmScore(gmm, self.z[0], alpha, sigma).shape))


    def test_gmmScore_symmetric(self):
        """
        Test src.gmm:gmmScore() vanishes at the center of a symmetric mixture.
        """
        origin = torch.zeros(2, dtype=torch.float64)
        for t in [0.2, 0.6]:
            alpha, sigma = alphaSigma(Schedule(), t)
            actual = gmmScore(self.two_class, origin, alpha, sigma)
            self.assertTrue(torch.allclose(origin, actual, atol=1e-12))


    def test_gmmScore_finiteDifference(self):
        """
        Test src.gmm:gmmScore() against finite differences of gmmLogDensity().
        """
        for gmm in [self.two_class, self.three]:
            self.assertLess(checkScore(gmm, Schedule(), torchGenerator(0)), 1e-5)


    def test_gmmLogDensity(self):
        """
        Test src.gmm:gmmLogDensity().
        """
        gmm = LabeledGMM([1.0], [[0.0, 0.0]], [[1.0, 1.0]], [0])
        actual = gmmLogDensity(gmm, torch.zeros(2, dtype=torch.float64))
        self.assertAlmostEqual(-math.log(2.0 * math.pi), float(actual), places=12)
        self.assertEqual((8,), tuple(gmmLogDensity(gmm, self.z).shape))


    def test_gmmClassPosterior(self):
        """
        Test src.gmm:gmmClassPosterior().
        """
        #### Case 1 -- midpoint of two mirrored classes
        actual = gmmClassPosterior(self.two_class, torch.zeros(2, dtype=torch.float64))
        self.assertTrue(torch.allclose(torch.tensor([0.5, 0.5], dtype=torch.float64), actual))

        #### Case 2 -- at a class mean
        actual = gmmClassPosterior(self.two_class, torch.tensor([2.0, 0.0], dtype=torch.float64))
        self.assertGreater(float(actual[0]), 0.999)

        #### Case 3 -- a single class has posterior 1 everywhere
        gmm = LabeledGMM([0.5, 0.5], [[1.0], [-1.0]], [[1.0], [1.0]], [3, 3])
        actual = gmmClassPosterior(gmm, torch.tensor([[0.3], [5.0]], dtype=torch.float64))
        self.assertTrue(torch.allclose(torch.ones(2, 1, dtype=torch.float64), actual))

        #### Case 4 -- batch shape and normalization
        actual = gmmClassPosterior(self.three, self.z)
        self.assertEqual((8, 2), tuple(actual.shape))
        self.assertTrue(torch.allclose(torch.ones(8, dtype=torch.float64), actual.sum(dim=-1)))


    def test_gmmSample(self):
        """
        Test src.gmm:gmmSample().
        """
        x, labels = gmmSample(self.two_class, 100000, torchGenerator(3))
        self.assertEqual((100000, 2), tuple(x.shape))
        self.assertLess(abs(float(torch.mean((labels == 0).double())) - 0.5), 0.01)
        class_mean = torch.mean(x[labels == 0], dim=0)
        self.assertTrue(torch.allclose(torch.tensor([2.0, 0.0], dtype=torch.float64), class_mean,
                                       atol=0.02))


    def test_classWeights(self):
        """
        Test src.gmm:classWeights().
        """
        expected = torch.tensor([0.8, 0.2], dtype=torch.float64)
        self.assertTrue(torch.allclose(expected, classWeights(self.three)))


    def test_gmmBayesClassifier(self):
        """
        Test src.gmm:gmmBayesClassifier() reproduces the exact class posterior.
        """
        #### Case 1 -- shared-variance mixture
        clf = gmmBayesClassifier(self.two_class)
        self.assertTrue(clf.binary)
        self.assertListEqual(["0", "1"], clf.class_names)
        expected = gmmClassPosterior(self.two_class, self.z).numpy()
        actual = predictProba(clf, self.z)
        self.assertTrue(np.allclose(expected, actual, atol=1e-9))

        #### Case 2 -- several components per class
        with self.assertRaises(GMMSpecError):
            gmmBayesClassifier(self.three)


    def test_loadGMMSpec(self):
        """
        Test src.gmm:loadGMMSpec() and LabeledGMM validation.
        """
        #### Case 1 -- fixture contents
        self.assertEqual(2, self.two_class.dim)
        self.assertListEqual([0, 1], self.two_class.classes)
        self.assertListEqual([0, 0, 1], self.three.labels)

        #### Case 2 -- malformed files and tables
        with self.assertRaises(GMMSpecError):
            loadGMMSpec(os.path.join(TEST_FILES, "bad.gmm"))
        with self.assertRaises(GMMSpecError):
            LabeledGMM([0.5, 0.4], [[0.0], [1.0]], [[1.0], [1.0]], [0, 1])
        with self.assertRaises(GMMSpecError):
            LabeledGMM([1.0], [[0.0]], [[0.0]], [0])


class TestLayersAndOptim(unittest.TestCase):
    """
    Test cases for functions in src.layers and src.optim.
    """
    def test_warmupCosine(self):
        """
        Test src.optim:warmupCosine().
        """
        self.assertAlmostEqual(0.1, warmupCosine(0, 10, 100), places=12)
        self.assertAlmostEqual(1.0, warmupCosine(9, 10, 100), places=12)
        self.assertAlmostEqual(1.0, warmupCosine(10, 10, 100), places=12)
        self.assertAlmostEqual(0.5, warmupCosine(55, 10, 100), places=12)
        self.assertAlmostEqual(0.0, warmupCosine(100, 10, 100), places=12)
        self.assertEqual(1.0, warmupCosine(3, 0, 0))


    def test_optimizerStep(self):
        """
        Test src.optim:buildOptimizer() and optimizerStep().
        """
        torch.manual_seed(0)
        layer = torch.nn.Linear(3, 1)
        optimizer, scheduler = buildOptimizer(layer.parameters(), 0.1, 0.0, 0.999, 2, 10)
        before = layer.weight.detach().clone()
        loss = torch.sum(layer(torch.ones(4, 3)) ** 2)
        loss.backward()
        norm = optimizerStep(optimizer, scheduler, layer.parameters())
        self.assertGreater(norm, 0.0)
        self.assertIsNone(layer.weight.grad)
        self.assertFalse(torch.equal(before, layer.weight.detach()))


    def test_layers(self):
        """
        Test src.layers building blocks.
        """
        #### Case 1 -- sinusoidal features are sines then cosines
        features = sinusoidalFeatures(torch.tensor([0.0, 0.5, 1.0]), 8)
        self.assertEqual((3, 8), tuple(features.shape))
        squares = features[:, :4] ** 2 + features[:, 4:] ** 2
        self.assertTrue(torch.allclose(torch.ones(3, 4), squares, atol=1e-6))

        #### Case 2 -- a fresh adaptive norm is a plain RMS norm
        torch.manual_seed(0)
        x = torch.randn(2, 5, 8)
        adaptive = AdaptiveRMSNorm(8, 4)
        plain = RMSNorm(8)
        self.assertTrue(torch.allclose(plain(x), adaptive(x, torch.randn(2, 4)), atol=1e-6))

        #### Case 3 -- bad shapes
        with self.assertRaises(ValueError):
            SelfAttention(6, 4)
        with self.assertRaises(ValueError):
            TimeFeatures(7, 8)

        #### Case 4 -- parameter count
        self.assertEqual(8, countParameters(torch.nn.Linear(3, 2)))

        #### Case 5 -- attention matches masked softmax and only looks back when causal
        torch.manual_seed(1)
        x = torch.randn(2, 5, 8)
        for causal in [True, False]:
            attention = SelfAttention(8, 2, causal=causal)
            with torch.no_grad():
                q, k, v = attention.qkv(x).split(8, dim=-1)
                q, k, v = [t.view(2, 5, 2, 4).transpose(1, 2) for t in (q, k, v)]
                scores = (q @ k.transpose(-2, -1)) / 2.0
                if causal:
                    scores = scores.masked_fill(torch.ones(5, 5).tril() == 0, float("-inf"))
                mixed = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(2, 5, 8)
                self.assertTrue(torch.allclose(attention.proj(mixed), attention(x), atol=1e-5))

                changed = x.clone()
                changed[:, -1] += 1.0
                same = torch.allclose(attention(x)[:, :-1], attention(changed)[:, :-1])
                self.assertEqual(causal, same)


class TestCheckpoint(unittest.TestCase):
    """
    Test cases for functions in src.checkpoint.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        os.makedirs(DATA_DIR, exist_ok=True)
        self.filepath = os.path.join(DATA_DIR, "model.ckpt")
        self.tensors = OrderedDict([
            ("a", torch.arange(6, dtype=torch.float32).reshape(2, 3)),
            ("b", np.array([0.5, -1.25])),
        ])


    def tearDown(self):
        """
        Necessary cleanup for these test cases.
        """
        _removeDataDir()


    def test_roundTrip(self):
        """
        Test src.checkpoint:saveCheckpoint() and loadCheckpoint().
        """
        saveCheckpoint(self.filepath, self.tensors, {"kind": "test", "dim": 3})
        tensors, meta = loadCheckpoint(self.filepath, {"a": (2, 3)})
        self.assertListEqual(["a", "b"], list(tensors.keys()))
        self.assertTrue(np.array_equal(self.tensors["a"].numpy(), tensors["a"]))
        self.assertTrue(np.array_equal(self.tensors["b"].astype(np.float32), tensors["b"]))
        self.assertDictEqual({"kind": "test", "dim": 3}, meta)
        with open(self.filepath, "rb") as f:
            self.assertEqual(b"DGLMCKP1", f.read(8))


    def test_corruptFiles(self):
        """
        Test src.checkpoint:loadCheckpoint() on damaged files.
        """
        saveCheckpoint(self.filepath, self.tensors)
        with open(self.filepath, "rb") as f:
            data = f.read()

        #### Case 1 -- truncated payload
        with open(self.filepath, "wb") as f:
            f.write(data[:-4])
        with self.assertRaises(CheckpointFormatError):
            loadCheckpoint(self.filepath)

        #### Case 2 -- trailing bytes
        with open(self.filepath, "wb") as f:
            f.write(data + b"\x00\x00\x00\x00")
        with self.assertRaises(CheckpointFormatError):
            loadCheckpoint(self.filepath)

        #### Case 3 -- bad magic
        with open(self.filepath, "wb") as f:
            f.write(b"NOTACKPT" + data[8:])
        with self.assertRaises(CheckpointFormatError):
            loadCheckpoint(self.filepath)


    def test_shapes(self):
        """
        Test src.checkpoint shape checks.
        """
        saveCheckpoint(self.filepath, self.tensors)

        #### Case 1 -- wrong expected shape
        with self.assertRaises(CheckpointShapeError):
            loadCheckpoint(self.filepath, {"a": (3, 2)})

        #### Case 2 -- missing tensor
        with self.assertRaises(CheckpointShapeError):
            loadCheckpoint(self.filepath, {"c": (1,)})

        #### Case 3 -- modules of a different size
        saveModules(self.filepath, OrderedDict([("layer", torch.nn.Linear(3, 2))]))
        with self.assertRaises(CheckpointShapeError):
            loadModulesState(self.filepath, OrderedDict([("layer", torch.nn.Linear(4, 2))]))

        #### Case 4 -- extra module in the file
        saveModules(self.filepath, OrderedDict([("layer", torch.nn.Linear(3, 2)),
                                                ("other", torch.nn.Linear(2, 2))]))
        with self.assertRaises(CheckpointShapeError):
            loadModulesState(self.filepath, OrderedDict([("layer", torch.nn.Linear(3, 2))]))


    def test_modules(self):
        """
        Test src.checkpoint:saveModules() and loadModulesState().
        """
        torch.manual_seed(0)
        source = torch.nn.Linear(3, 2)
        target = torch.nn.Linear(3, 2)
        saveModules(self.filepath, OrderedDict([("layer", source)]), {"kind": "linear"})
        meta = loadModulesState(self.filepath, OrderedDict([("layer", target)]))
        self.assertEqual("linear", meta["kind"])
        self.assertTrue(torch.equal(source.weight, target.weight))
        self.assertTrue(torch.equal(source.bias, target.bias))


class TestDenoiser(unittest.TestCase):
    """
    Test cases for functions in src.denoiser.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        os.makedirs(DATA_DIR, exist_ok=True)
        self.config = _tinyConfig()
        torch.manual_seed(0)
        self.model = buildDenoiser(self.config, 8)
        generator = torchGenerator(1)
        self.x = torch.nn.functional.normalize(torch.randn(40, 8, generator=generator), dim=-1)
        self.x_pref = torch.nn.functional.normalize(torch.randn(40, 8, generator=generator), dim=-1)


    def tearDown(self):
        """
        Necessary cleanup for these test cases.
        """
        _removeDataDir()


    def test_predictV(self):
        """
        Test src.denoiser:predictV() on single vectors and batches.
        """
        z = torch.randn(5, 8, generator=torchGenerator(2), dtype=torch.float64)
        with torch.no_grad():
            batch = predictV(self.model, LatentState(z, 0.5, 0.0), self.x_pref[:5])
            single = predictV(self.model, LatentState(z[0], 0.5, 0.0), self.x_pref[0])
        self.assertEqual("v", batch.kind)
        self.assertEqual((5, 8), tuple(batch.value.shape))
        self.assertEqual(torch.float64, batch.value.dtype)
        self.assertTrue(torch.allclose(batch.value[0], single.value, atol=1e-6))
        with self.assertRaises(DimensionMismatchError):
            predictV(self.model, LatentState(z, 0.5, 0.0), torch.zeros(3))


    def test_nullPrefix(self):
        """
        Test src.denoiser:Denoiser a masked prefix matches a missing one.
        """
        z = torch.randn(4, 8, generator=torchGenerator(3))
        lam = torch.zeros(4)
        everyone = torch.ones(4, dtype=torch.bool)
        with torch.no_grad():
            missing = self.model(z, lam, None)
            masked = self.model(z, lam, self.x_pref[:4], everyone)
            kept = self.model(z, lam, self.x_pref[:4], ~everyone)
        self.assertTrue(torch.allclose(missing, masked, atol=0.0))
        self.assertFalse(torch.allclose(missing, kept))


    def test_denoiserLoss_gradient(self):
        """
        Test src.denoiser:denoiserLoss() gradients against finite differences.
        """
        model = self.model.double()
        x, x_pref = self.x[:6].double(), self.x_pref[:6].double()
        lam = np.linspace(-5.0, 5.0, 6)
        eps = torch.randn(6, 8, generator=torchGenerator(4), dtype=torch.float64)
        ones = np.ones(6)
        wfn = WeightingFn()

        def loss():
            return denoiserLoss(model, x, x_pref, lam, eps, None, ones, wfn)[0]

        model.zero_grad()
        loss().backward()
        for parameter, index in [(model.output_proj.bias, (0,)),
                                 (model.input_proj.weight, (1, 2))]:
            analytic = float(parameter.grad[index])
            numeric = _finiteDifference(loss, parameter, index)
            self.assertLess(abs(numeric - analytic), 1e-4 * abs(analytic) + 1e-9)


    def test_trainStep(self):
        """
        Test src.denoiser:trainStep() is finite, deterministic and feeds the adaptive sampler.
        """
        losses = list()
        for _ in range(2):
            torch.manual_seed(0)
            model = buildDenoiser(self.config, 8)
            trainer = DenoiserTrainer(model, self.config)
            losses.append([trainStep(trainer, self.x[:8], self.x_pref[:8]) for _ in range(3)])
        self.assertListEqual(losses[0], losses[1])
        self.assertTrue(all(math.isfinite(loss) for loss in losses[0]))
        self.assertFalse(np.allclose(trainer.adaptive.ema_loss, 1.0))

        #### Case 2 -- empty batch
        with self.assertRaises(ValueError):
            trainStep(trainer, self.x[:0], self.x_pref[:0])


    def test_trainDenoiser(self):
        """
        Test src.denoiser:trainDenoiser() and heldoutLosses().
        """
        model, history = trainDenoiser(self.x, self.x_pref, self.config, verbose=False)
        self.assertGreater(len(history), 0)
        self.assertEqual(self.config["train.steps"], history[-1][0])
        self.assertFalse(model.training)

        expected = heldoutLosses(model, self.x, self.x_pref, WeightingFn(), seed=5)
        actual = heldoutLosses(model, self.x, self.x_pref, WeightingFn(), seed=5)
        self.assertEqual(expected, actual)
        self.assertTrue(all(math.isfinite(v) for v in actual))


    def test_trainDenoiser_heldoutTrend(self):
        """
        Test src.denoiser:trainDenoiser() lowers both held-out losses under prefix dropout.
        """
        config = _tinyConfig(["model.hidden=32", "train.steps=400", "train.batch_size=64",
                              "train.warmup=40", "train.mask_prob=0.5"])
        generator = torchGenerator(3)
        x_pref = torch.nn.functional.normalize(torch.randn(1000, 8, generator=generator), dim=-1)
        noise = 0.3 * torch.randn(1000, 8, generator=generator)
        x_cont = torch.nn.functional.normalize(x_pref.flip(-1) + noise, dim=-1)

        _, history = trainDenoiser(x_cont, x_pref, config, verbose=False)
        self.assertEqual(10, len(history))
        for column, name in [(1, "prefix"), (2, "null")]:
            losses = [entry[column] for entry in history]
            self.assertLess(losses[-1], losses[0], name)
            for before, after in zip(losses, losses[1:]):
                self.assertLessEqual(after, 1.05 * before, "{}: {}".format(name, losses))


    def test_saveLoad(self):
        """
        Test src.denoiser:saveDenoiser() and loadDenoiser().
        """
        filepath = os.path.join(DATA_DIR, "denoiser.ckpt")
        saveDenoiser(self.model, filepath)
        z = LatentState(torch.randn(3, 8, generator=torchGenerator(6)), 0.5, 0.0)

        #### Case 1 -- architecture from the manifest
        loaded = loadDenoiser(filepath)
        with torch.no_grad():
            expected = predictV(self.model, z, self.x_pref[:3]).value
            actual = predictV(loaded, z, self.x_pref[:3]).value
        self.assertTrue(torch.equal(expected, actual))

        #### Case 2 -- architecture from a matching config
        loaded = loadDenoiser(filepath, self.config)
        self.assertEqual(self.model.hidden, loaded.hidden)

        #### Case 3 -- a config that disagrees with the stored shapes
        with self.assertRaises(CheckpointShapeError):
            loadDenoiser(filepath, _tinyConfig(["model.hidden=32"]))


class _CondOnlyDenoiser(LearnedDenoiser):
    """
    Records whether the unconditional branch was ever evaluated.
    """
    def __init__(self, model):
        super().__init__(model)
        self.unconditional_calls = 0


    def predict(self, latent, prefix):
        if prefix is None:
            self.unconditional_calls += 1
        return super().predict(latent, prefix)


class TestGuidedSampler(unittest.TestCase):
    """
    Test cases for functions in src.sampler.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        self.schedule = Schedule()
        self.two_class = loadGMMSpec(os.path.join(FIXTURES, "two_class.gmm"))
        self.standard = loadGMMSpec(os.path.join(TEST_FILES, "standard_normal.gmm"))
        self.clf = gmmBayesClassifier(self.two_class)
        self.z = torch.tensor([0.4, -0.7], dtype=torch.float64)


    def test_cfgBlend(self):
        """
        Test src.sampler:cfgBlend().
        """
        cond = Prediction(kind="v", value=torch.tensor([1.0], dtype=torch.float64))
        uncond = Prediction(kind="v", value=torch.tensor([0.0], dtype=torch.float64))

        #### Case 1 -- extrapolation past the conditional prediction
        self.assertEqual(2.0, float(cfgBlend(cond, uncond, 2.0).value))

        #### Case 2 -- w = 1 and w = 0 recover each branch
        self.assertTrue(torch.equal(cond.value, cfgBlend(cond, uncond, 1.0).value))
        self.assertTrue(torch.equal(uncond.value, cfgBlend(cond, uncond, 0.0).value))

        #### Case 3 -- mismatches
        with self.assertRaises(KindMismatchError):
            cfgBlend(cond, Prediction(kind="eps", value=uncond.value), 2.0)
        with self.assertRaises(DimensionMismatchError):
            cfgBlend(cond, Prediction(kind="v", value=torch.zeros(2, dtype=torch.float64)), 2.0)


    def test_dpsEstimate(self):
        """
        Test src.sampler:dpsEstimate() on the standard normal oracle: x_hat = alpha z.
        """
        for t in [0.2, 0.5, 0.8]:
            latent = latentAt(self.schedule, self.z, t)
            alpha, _ = alphaSigma(self.schedule, t)
            actual = dpsEstimate(OracleDenoiser(self.standard), latent, None)
            self.assertTrue(torch.allclose(alpha * self.z, actual, atol=1e-12))


    def test_singleDraw(self):
        """
        Test src.sampler:mcGuidanceGradient() with one draw reduces to plain DPS.
        """
        latent = latentAt(self.schedule, self.z, 0.5)
        alpha, _ = alphaSigma(self.schedule, 0.5)
        terms = [GuidanceTerm(self.clf, "0")]
        expected = -alpha * lossGradX(self.clf, alpha * self.z, "0")
        for mc_form in ["paper_literal", "likelihood_mean"]:
            for jacobian in ["full", "scaled_identity"]:
                cfg = GuidanceConfig(mc_samples=1, mc_form=mc_form, jacobian=jacobian)
                actual = mcGuidanceGradient(OracleDenoiser(self.standard), terms, latent, None, cfg)
                self.assertTrue(torch.allclose(expected, actual, atol=1e-12))


    def test_zeroWeight(self):
        """
        Test src.sampler:mcGuidanceGradient() with a zero-weight classifier.
        """
        latent = latentAt(self.schedule, self.z, 0.5)
        cfg = GuidanceConfig(mc_samples=8)
        actual = mcGuidanceGradient(OracleDenoiser(self.two_class),
                                    [GuidanceTerm(self.clf, "0", weight=0.0)], latent, None, cfg,
                                    torchGenerator(0))
        self.assertTrue(torch.equal(torch.zeros(2, dtype=torch.float64), actual))


    def test_gradientMatchesObjective(self):
        """
        Test src.sampler:mcGuidanceGradient() is the z-gradient of guidanceObjective().
        """
        xi = torch.randn(4, 2, generator=torchGenerator(7), dtype=torch.float64)
        terms = [GuidanceTerm(self.clf, "0")]
        denoiser = OracleDenoiser(self.two_class)
        z = torch.tensor([0.3, 0.2], dtype=torch.float64)
        for mc_form in ["paper_literal", "likelihood_mean"]:
            cfg = GuidanceConfig(mc_samples=4, mc_form=mc_form)
            analytic = mcGuidanceGradient(denoiser, terms, latentAt(self.schedule, z, 0.4), None,
                                          cfg, xi=xi)

            def objective():
                return guidanceObjective(denoiser, terms, latentAt(self.schedule, z, 0.4), None,
                                         cfg, xi=xi)

            for i in range(2):
                numeric = _finiteDifference(objective, z, (i,))
                self.assertLess(abs(numeric - float(analytic[i])),
                                1e-4 * abs(float(analytic[i])) + 1e-7)


    def test_guidanceSkipped(self):
        """
        Test src.sampler:sample() with s = 0 or zero weights is plain sampling.
        """
        cfg = GuidanceConfig(steps=10)
        denoiser = OracleDenoiser(self.two_class)
        expected = sample(denoiser, None, None, cfg, torchGenerator(1), self.schedule, num=20)

        actual = sample(denoiser, None, [GuidanceTerm(self.clf, "0")], cfg, torchGenerator(1),
                        self.schedule, num=20)
        self.assertTrue(torch.equal(expected, actual))

        weighted = GuidanceConfig(steps=10, guidance_scale=1.0)
        actual = sample(denoiser, None, [GuidanceTerm(self.clf, "0", weight=0.0)], weighted,
                        torchGenerator(1), self.schedule, num=20)
        self.assertTrue(torch.equal(expected, actual))


    def test_cfgOne(self):
        """
        Test src.sampler:sample() with w = 1 never evaluates the unconditional branch.
        """
        torch.manual_seed(0)
        denoiser = _CondOnlyDenoiser(buildDenoiser(_tinyConfig(), 8))
        prefix = torch.ones(8, dtype=torch.float64) / math.sqrt(8.0)
        cfg = GuidanceConfig(steps=5, cfg_weight=1.0)
        first = sample(denoiser, prefix, None, cfg, torchGenerator(2), self.schedule, num=3)
        second = sample(denoiser, prefix, None, cfg, torchGenerator(2), self.schedule, num=3)
        self.assertEqual(0, denoiser.unconditional_calls)
        self.assertTrue(torch.equal(first, second))

        #### Case 2 -- any other weight needs both branches
        sample(denoiser, prefix, None, GuidanceConfig(steps=5, cfg_weight=2.0), torchGenerator(2),
               self.schedule, num=3)
        self.assertEqual(5, denoiser.unconditional_calls)

        #### Case 3 -- prefix of the wrong size
        with self.assertRaises(DimensionMismatchError):
            sample(denoiser, torch.zeros(3), None, cfg, torchGenerator(2), self.schedule)


    def test_sample_shapesAndSeeds(self):
        """
        Test src.sampler:sample() shapes and determinism.
        """
        cfg = GuidanceConfig(steps=8, guidance_scale=1.0, mc_samples=4)
        denoiser = OracleDenoiser(self.two_class)
        terms = [GuidanceTerm(self.clf, "0")]

        single = sample(denoiser, None, terms, cfg, torchGenerator(3), self.schedule)
        self.assertEqual((2,), tuple(single.shape))

        first = sample(denoiser, None, terms, cfg, torchGenerator(3), self.schedule, num=5)
        second = sample(denoiser, None, terms, cfg, torchGenerator(3), self.schedule, num=5)
        other = sample(denoiser, None, terms, cfg, torchGenerator(4), self.schedule, num=5)
        self.assertEqual((5, 2), tuple(first.shape))
        self.assertTrue(torch.equal(first, second))
        self.assertFalse(torch.equal(first, other))


    def test_guidanceConfig(self):
        """
        Test src.sampler:GuidanceConfig validation and guidanceFromConfig().
        """
        #### Case 1 -- invalid settings
        for kwargs in [dict(mc_samples=0), dict(steps=0), dict(cfg_weight=-1.0),
                       dict(mc_form="mode"), dict(jacobian="none"), dict(t_min=0.0)]:
            with self.assertRaises(ValueError):
                GuidanceConfig(**kwargs)

        #### Case 2 -- config values with overrides, None overrides ignored
        config = RunConfig()
        cfg = guidanceFromConfig(config, steps=7, guidance_scale=None)
        self.assertEqual(7, cfg.steps)
        self.assertEqual(0.0, cfg.guidance_scale)
        self.assertEqual(32, cfg.mc_samples)
        self.assertEqual(0.2, cfg.v_interp)
        self.assertEqual("full", cfg.jacobian)


    def test_guidanceStrength(self):
        """
        Test src.sampler:sample() steers harder toward the target as s grows.
        """
        denoiser = OracleDenoiser(self.two_class)
        terms = [GuidanceTerm(self.clf, "0")]
        fractions = list()
        for scale in [0.0, 1.0, 2.0, 5.0, 10.0]:
            cfg = GuidanceConfig(guidance_scale=scale)
            x = sample(denoiser, None, terms, cfg, torchGenerator(11), self.schedule, num=1000)
            favored = gmmClassPosterior(self.two_class, x)[:, 0] > 0.5
            fractions.append(float(torch.mean(favored.double())))
        for before, after in zip(fractions, fractions[1:]):
            self.assertGreaterEqual(after, before - 0.02)
        self.assertGreater(fractions[-1], fractions[0])


class TestAttributeClassifier(unittest.TestCase):
    """
    Test cases for functions in src.classifier.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        os.makedirs(DATA_DIR, exist_ok=True)
        rng = numpyGenerator(0)
        self.X = np.vstack([rng.normal(-1.0, 1.0, (200, 3)), rng.normal(1.0, 1.0, (200, 3))])
        self.y = ["neg"] * 200 + ["pos"] * 200


    def tearDown(self):
        """
        Necessary cleanup for these test cases.
        """
        _removeDataDir()


    def test_fit_binary(self):
        """
        Test src.classifier:fit() on two separable blobs.
        """
        clf = fit(self.X, self.y)
        self.assertTrue(clf.binary)
        self.assertListEqual(["neg", "pos"], clf.class_names)
        self.assertEqual((1, 3), tuple(clf.W.shape))

        accuracy, auc = evaluateClassifier(clf, self.X, self.y)
        self.assertGreater(accuracy, 0.9)
        self.assertGreater(auc, 0.95)
        self.assertLess(trainingLoss(clf, self.X, self.y), math.log(2.0))

        #### Case 2 -- the optimum has a vanishing gradient
        targets = np.asarray([clf.classIndex(label) for label in self.y])
        params = np.concatenate([clf.W.numpy().ravel(), clf.b.numpy()])
        _, grad = _objective(params, self.X, targets, np.ones(len(targets)), 1e-3, 1)
        self.assertLess(float(np.linalg.norm(grad)), 1e-3)


    def test_fit_multiclass(self):
        """
        Test src.classifier:fit() with three classes.
        """
        rng = numpyGenerator(1)
        centers = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 3.0]])
        X = np.vstack([rng.normal(c, 1.0, (100, 2)) for c in centers])
        y = ["a"] * 100 + ["b"] * 100 + ["c"] * 100
        clf = fit(X, y, balanced=True)
        self.assertFalse(clf.binary)
        self.assertEqual((3, 2), tuple(clf.W.shape))
        accuracy, _ = evaluateClassifier(clf, X, y)
        self.assertGreater(accuracy, 0.9)


    def test_fit_errors(self):
        """
        Test src.classifier:fit() on bad labels.
        """
        with self.assertRaises(SingleClassError):
            fit(self.X, ["pos"] * 400)
        with self.assertRaises(UnknownClassError):
            fit(self.X, self.y, class_names=["pos", "other"])


    def test_fit_convergenceWarning(self):
        """
        Test src.classifier:fit() warns when L-BFGS-B stops early.
        """
        with mock.patch("builtins.print") as printed:
            fit(self.X, self.y)
        printed.assert_not_called()

        with mock.patch("src.classifier.MAX_ITER", 1), mock.patch("builtins.print") as printed:
            clf = fit(self.X, self.y)
        self.assertEqual(1, printed.call_count)
        self.assertTrue(printed.call_args[0][0].startswith("WARNING: L-BFGS-B did not converge"))
        self.assertEqual((1, 3), tuple(clf.W.shape))


    def test_fit_matchesBayes(self):
        """
        Test src.classifier:fit() on mixture samples against the exact Bayes rule.
        """
        overlapping = LabeledGMM(weights=[0.5, 0.5], means=[[0.6, 0.0], [-0.6, 0.0]],
                                 diag_vars=[[1.0, 1.0], [1.0, 1.0]], labels=[0, 1])
        mixtures = [("overlapping", overlapping, False)] + [
            (name, loadGMMSpec(os.path.join(FIXTURES, name)), True)
            for name in ["two_class.gmm", "three_component.gmm"]
        ]
        for name, gmm, separated in mixtures:
            generator = torchGenerator(11)
            x_train, y_train = gmmSample(gmm, 10000, generator)
            x_test, y_test = gmmSample(gmm, 10000, generator)
            clf = fit(x_train.numpy(), y_train.tolist())

            classes = [str(c) for c in gmm.classes]
            self.assertListEqual(classes, clf.class_names)
            bayes = torch.argmax(gmmClassPosterior(gmm, x_test), dim=-1).numpy()
            fitted = np.argmax(predictProba(clf, x_test.numpy()), axis=1)
            targets = np.asarray([classes.index(str(label)) for label in y_test.tolist()])

            bayes_rate = float(np.mean(bayes == targets))
            accuracy = float(np.mean(fitted == targets))
            self.assertLess(abs(bayes_rate - accuracy), 0.02, name)
            if separated:
                self.assertGreaterEqual(float(np.mean(bayes == fitted)), 0.98, name)


    def test_lossGradX(self):
        """
        Test src.classifier:lossGradX() against autograd of -logProb().
        """
        binary = LinearAttributeClassifier([0.5, -1.0, 2.0], [0.1], ["neg", "pos"])
        multi = LinearAttributeClassifier([[0.5, -1.0, 2.0], [0.0, 1.0, 0.3], [-0.2, 0.4, 0.1]],
                                          [0.1, 0.0, -0.3], ["a", "b", "c"])
        for clf, target in [(binary, "pos"), (binary, "neg"), (multi, "b"), (multi, 2)]:
            x = torch.tensor([[0.3, -0.2, 0.9], [1.0, 0.5, -0.4]], dtype=torch.float64,
                             requires_grad=True)
            (-logProb(clf, x, target)).sum().backward()
            actual = lossGradX(clf, x.detach(), target)
            self.assertTrue(torch.allclose(x.grad, actual, atol=1e-12))


    def test_probabilities(self):
        """
        Test src.classifier:logProb() normalization and the two-row fold.
        """
        W = torch.tensor([[0.2, -0.4], [1.0, 0.5]], dtype=torch.float64)
        b = torch.tensor([0.3, -0.1], dtype=torch.float64)
        clf = LinearAttributeClassifier.fromLogitRows(W, b, ["x", "y"])
        self.assertEqual((1, 2), tuple(clf.W.shape))

        x = torch.tensor([[0.5, -1.5], [2.0, 0.1]], dtype=torch.float64)
        expected = torch.softmax(x @ W.T + b, dim=-1).numpy()
        self.assertTrue(np.allclose(expected, predictProba(clf, x), atol=1e-12))
        total = torch.exp(logProb(clf, x, "x")) + torch.exp(logProb(clf, x, "y"))
        self.assertTrue(torch.allclose(torch.ones(2, dtype=torch.float64), total, atol=1e-12))

        #### Case 2 -- unknown classes
        with self.assertRaises(UnknownClassError):
            clf.classIndex("z")
        with self.assertRaises(UnknownClassError):
            clf.classIndex(5)
        with self.assertRaises(SingleClassError):
            LinearAttributeClassifier([[1.0]], [0.0], ["only"])


    def test_balancedWeights(self):
        """
        Test src.classifier:balancedWeights().
        """
        expected = np.array([2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0])
        actual = balancedWeights(np.array([0, 0, 0, 1]), 2)
        self.assertTrue(np.allclose(expected, actual))


    def test_auroc(self):
        """
        Test src.classifier:auroc().
        """
        self.assertEqual(0.75, auroc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]))
        self.assertEqual(1.0, auroc([0.1, 0.2, 0.8], [False, False, True]))
        self.assertEqual(0.0, auroc([0.9, 0.2, 0.1], [False, True, True]))
        self.assertEqual(0.5, auroc([0.5, 0.5], [False, True]))
        self.assertTrue(math.isnan(auroc([0.1, 0.2], [True, True])))


    def test_saveLoad(self):
        """
        Test src.classifier:saveClassifier() and loadClassifier().
        """
        filepath = os.path.join(DATA_DIR, "clf.ckpt")
        clf = fit(self.X, self.y, attribute="sentiment")
        saveClassifier(clf, filepath)
        loaded = loadClassifier(filepath)
        self.assertListEqual(clf.class_names, loaded.class_names)
        self.assertEqual("sentiment", loaded.attribute)
        self.assertTrue(torch.equal(clf.W.float().double(), loaded.W))

        #### Case 2 -- a checkpoint of another kind
        saveCheckpoint(filepath, {"W": np.zeros((1, 3))}, {"kind": "denoiser"})
        with self.assertRaises(CheckpointFormatError):
            loadClassifier(filepath)


class TestGrammar(unittest.TestCase):
    """
    Test cases for functions in src.grammar.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        os.makedirs(DATA_DIR, exist_ok=True)
        self.grammar = _smallGrammar()


    def tearDown(self):
        """
        Necessary cleanup for these test cases.
        """
        _removeDataDir()


    def test_truePerplexity(self):
        """
        Test src.grammar:truePerplexity() on hand-computed chains.
        """
        #### Case 1 -- two symbols
        chain = _chainGrammar(["a", "b"], [0.5, 0.5], [[0.25, 0.75], [0.5, 0.5]])
        self.assertAlmostEqual(0.375 ** -0.5, truePerplexity(chain, ["a", "b"]))
        self.assertAlmostEqual(1.0 / 0.75, truePerplexity(chain, ["b"], prefix=["a"]))
        self.assertAlmostEqual(math.log(0.375), sequenceLogProb(chain, ["a", "b"]))

        #### Case 2 -- uniform over five symbols
        uniform = _chainGrammar(list("abcde"), [0.2] * 5, [[0.2] * 5] * 5)
        self.assertAlmostEqual(5.0, truePerplexity(uniform, list("abecd")))

        #### Case 3 -- a deterministic cycle
        cycle = _chainGrammar(list("abc"), [1.0, 0.0, 0.0],
                              [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        self.assertAlmostEqual(1.0, truePerplexity(cycle, list("abca")))
        self.assertEqual(math.inf, truePerplexity(cycle, list("ba")))


    def test_grammar_errors(self):
        """
        Test src.grammar error handling.
        """
        chain = _chainGrammar(["a", "b"], [0.5, 0.5], [[0.25, 0.75], [0.5, 0.5]])
        with self.assertRaises(ValueError):
            truePerplexity(chain, [])
        with self.assertRaises(UnknownSymbolError):
            truePerplexity(chain, ["a", "z"])
        with self.assertRaises(GrammarSpecError):
            _chainGrammar(["a", "b"], [0.5, 0.5], [[0.25, 0.7], [0.5, 0.5]])
        with self.assertRaises(GrammarSpecError):
            _chainGrammar(["a", "a"], [0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]])
        with self.assertRaises(GrammarSpecError):
            buildGrammar(attr_mass=0.6, leak_mass=0.4)
        with self.assertRaises(GrammarSpecError):
            attributeScores(self.grammar, ["f0"], "colour")


    def test_buildGrammar(self):
        """
        Test src.grammar:buildGrammar() sizes and determinism.
        """
        default = buildGrammar()
        self.assertEqual(200, len(default.vocabulary))
        self.assertEqual(4, len(default.combos))
        self.assertListEqual(["p{}".format(i) for i in range(24)],
                             default.lexicons["sentiment=pos"])

        again = _smallGrammar()
        self.assertEqual(4 * 4 + 8, len(self.grammar.vocabulary))
        self.assertTrue(np.array_equal(self.grammar.trans, again.trans))
        self.assertEqual("sentiment=pos,topic=A", self.grammar.comboLabel(self.grammar.combos[0]))


    def test_attributeScores(self):
        """
        Test src.grammar:attributeScores() and allAttributeScores().
        """
        tokens = ["p0", "p1", "p2", "p3"] * 6
        scores = attributeScores(self.grammar, tokens, "sentiment")
        self.assertListEqual(["pos", "neg"], list(scores.keys()))
        self.assertGreater(scores["pos"], 0.99)

        flat = allAttributeScores(self.grammar, ["f0", "a1", "n2"])
        self.assertListEqual(["sentiment:pos", "sentiment:neg", "topic:A", "topic:B"],
                             list(flat.keys()))
        self.assertAlmostEqual(1.0, flat["sentiment:pos"] + flat["sentiment:neg"])
        self.assertAlmostEqual(1.0, flat["topic:A"] + flat["topic:B"])


    def test_genCorpus(self):
        """
        Test src.grammar:genCorpus().
        """
        first = genCorpus(self.grammar, 20, numpyGenerator(3))
        second = genCorpus(self.grammar, 20, numpyGenerator(3))
        self.assertListEqual(first, second)
        for record in first:
            self.assertEqual(4, len(record.prefix))
            self.assertEqual(6, len(record.continuation))
            self.assertListEqual(["sentiment", "topic"], list(record.attributes.keys()))

        records = genCorpus(self.grammar, 10000, numpyGenerator(4))
        positive = np.mean([r.attributes["sentiment"] == "pos" for r in records])
        self.assertLess(abs(positive - 0.5), 0.02)


    def test_saveLoad(self):
        """
        Test src.grammar:saveGrammar(), loadGrammar(), saveCorpus() and loadCorpus().
        """
        #### Case 1 -- grammar
        filepath = os.path.join(DATA_DIR, "grammar.txt")
        saveGrammar(self.grammar, filepath)
        loaded = loadGrammar(filepath)
        self.assertListEqual(self.grammar.vocabulary, loaded.vocabulary)
        self.assertEqual(self.grammar.combos, loaded.combos)
        self.assertTrue(np.array_equal(self.grammar.trans, loaded.trans))
        self.assertTrue(np.array_equal(self.grammar.start, loaded.start))
        self.assertEqual((4, 6), (loaded.prefix_len, loaded.cont_len))

        #### Case 2 -- corpus
        filepath = os.path.join(DATA_DIR, "corpus.txt")
        records = genCorpus(self.grammar, 5, numpyGenerator(5))
        saveCorpus(records, filepath)
        self.assertListEqual(records, loadCorpus(filepath))

        #### Case 3 -- malformed files
        with self.assertRaises(CorpusFormatError):
            loadCorpus(os.path.join(TEST_FILES, "bad_corpus.txt"))
        filepath = os.path.join(DATA_DIR, "bad_grammar.txt")
        writeText(filepath, "vocabulary a b\nprior - 1.0\nstart - 0.5\n")
        with self.assertRaises(GrammarSpecError):
            loadGrammar(filepath)


class TestEmbedder(unittest.TestCase):
    """
    Test cases for functions in src.embedder.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        self.grammar = _smallGrammar()
        self.embedder = Embedder(self.grammar.vocabulary, dim=64, seed=1234)


    def test_embed(self):
        """
        Test src.embedder:embed().
        """
        a = embed(self.embedder, ["p0", "f1", "a2", "f1"])
        b = embed(self.embedder, ["f1", "f1", "a2", "p0"])
        self.assertTrue(np.allclose(a, b, atol=1e-12))
        self.assertAlmostEqual(1.0, float(np.linalg.norm(a)))
        self.assertEqual((64,), a.shape)

        self.assertEqual((3, 64), embedMany(self.embedder, [["p0"], ["f0"], ["n1", "b2"]]).shape)

        with self.assertRaises(EmptyTokensError):
            embed(self.embedder, [])
        with self.assertRaises(UnknownSymbolError):
            embed(self.embedder, ["p0", "zzz"])


    def test_seeds(self):
        """
        Test src.embedder:Embedder projections are fixed by the seed.
        """
        tokens = ["p0", "n1", "f2"]
        same = Embedder(self.grammar.vocabulary, dim=64, seed=1234)
        other = Embedder(self.grammar.vocabulary, dim=64, seed=99)
        self.assertTrue(np.array_equal(embed(self.embedder, tokens), embed(same, tokens)))
        self.assertFalse(np.allclose(embed(self.embedder, tokens), embed(other, tokens)))


    def test_cosine(self):
        """
        Test src.embedder:cosine().
        """
        self.assertAlmostEqual(0.0, cosine([1.0, 0.0], [0.0, 2.0]))
        self.assertAlmostEqual(1.0, cosine([1.0, 1.0], [2.0, 2.0]))
        self.assertAlmostEqual(-1.0, cosine([1.0, -1.0], [-3.0, 3.0]))


    def test_topicSeparation(self):
        """
        Test src.embedder:embed() places same-topic continuations closer than cross-topic ones.
        """
        records = genCorpus(self.grammar, 200, numpyGenerator(6))
        vectors = embedMany(self.embedder, [r.continuation for r in records])
        topics = np.asarray([r.attributes["topic"] == "A" for r in records])
        similarity = vectors @ vectors.T
        same = topics[:, None] == topics[None, :]
        np.fill_diagonal(same, False)
        cross = topics[:, None] != topics[None, :]
        self.assertGreater(float(np.mean(similarity[same])), float(np.mean(similarity[cross])))


class TestDecoder(unittest.TestCase):
    """
    Test cases for functions in src.decoder.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        os.makedirs(DATA_DIR, exist_ok=True)
        self.config = _tinyConfig(["decoder.layers=2", "decoder.heads=4"])
        self.vocab = DecoderVocab(list("abcde"))
        torch.manual_seed(0)
        self.decoder, self.prompt_gen = buildDecoder(self.config, self.vocab, 4, prompt_tokens=3)
        self.schedule = Schedule(kind="scaled_cosine", shift=3.0)
        self.prefix_ids = torch.as_tensor([[BOS_ID, 2, 3], [BOS_ID, 4, 5]])
        self.cont_ids = torch.as_tensor([[6, 5, 4, 3], [2, 2, 3, 3]])
        self.z = torch.randn(2, 4, generator=torchGenerator(1))
        self.alpha = torch.tensor([0.9, 0.4])


    def tearDown(self):
        """
        Necessary cleanup for these test cases.
        """
        _removeDataDir()


    def test_vocab(self):
        """
        Test src.decoder:DecoderVocab.
        """
        self.assertEqual(7, len(self.vocab))
        self.assertListEqual([2, 6], self.vocab.encode(["a", "e"]))
        self.assertListEqual(["<bos>", "<eos>", "c"], self.vocab.decode([BOS_ID, EOS_ID, 4]))
        with self.assertRaises(UnknownSymbolError):
            self.vocab.encode(["z"])


    def test_shapes(self):
        """
        Test src.decoder:PromptGenerator and ToyDecoder output shapes.
        """
        soft = self.prompt_gen(self.z, self.alpha)
        self.assertEqual((2, 3, 16), tuple(soft.shape))
        logits = self.decoder(self.prefix_ids, soft, self.cont_ids)
        self.assertEqual((2, 3 + 3 + 4, 7), tuple(logits.shape))
        logits = self.decoder(self.prefix_ids, None, self.cont_ids[:, :0])
        self.assertEqual((2, 3, 7), tuple(logits.shape))

        with self.assertRaises(ValueError):
            self.decoder(self.prefix_ids, soft, torch.full((2, 30), 3, dtype=torch.long))


    def test_causality(self):
        """
        Test src.decoder:ToyDecoder logits never depend on later tokens.
        """
        with torch.no_grad():
            soft = self.prompt_gen(self.z, self.alpha)
            before = self.decoder(self.prefix_ids, soft, self.cont_ids)
            changed = self.cont_ids.clone()
            changed[:, -1] = 2
            after = self.decoder(self.prefix_ids, soft, changed)
        self.assertTrue(torch.allclose(before[:, :-1], after[:, :-1], atol=1e-6))
        self.assertFalse(torch.allclose(before[:, -1], after[:, -1]))


    def test_targets(self):
        """
        Test src.decoder:lossMask(), streamTargets() and continuationLoss().
        """
        expected = torch.as_tensor([[5, 6, IGNORE_INDEX, IGNORE_INDEX, 7, 8, 9, 10, EOS_ID]])
        actual = streamTargets(torch.as_tensor([[0, 5, 6]]), 2, torch.as_tensor([[7, 8, 9, 10]]))
        self.assertTrue(torch.equal(expected, actual))

        expected = [False] * 4 + [True] * 5
        self.assertListEqual(expected, lossMask(3, 2, 4).tolist())
        self.assertListEqual([False, False, True, True], lossMask(3, 0, 1).tolist())

        #### Case 2 -- prefix targets never reach the loss
        with torch.no_grad():
            logits = self.decoder(self.prefix_ids, self.prompt_gen(self.z, self.alpha),
                                  self.cont_ids)
        targets = streamTargets(self.prefix_ids, 3, self.cont_ids)
        mask = lossMask(3, 3, 4)
        scrambled = targets.clone()
        scrambled[:, :2] = 6
        self.assertEqual(float(continuationLoss(logits, targets, mask)),
                         float(continuationLoss(logits, scrambled, mask)))

        #### Case 3 -- a truncated continuation has no <eos> target
        actual = streamTargets(torch.as_tensor([[0, 5, 6]]), 2, torch.as_tensor([[7, 8, 9, 10]]),
                               eos=False)
        self.assertEqual(IGNORE_INDEX, int(actual[0, -1]))
        self.assertListEqual([7, 8, 9, 10], actual[0, 4:8].tolist())
        self.assertEqual(0, int(torch.sum(actual == EOS_ID)))


    def test_decoderLoss_gradient(self):
        """
        Test src.decoder:decoderLoss() gradients against finite differences.
        """
        decoder, prompt_gen = self.decoder.double(), self.prompt_gen.double()
        z, alpha = self.z.double(), self.alpha.double()

        def loss():
            return decoderLoss(decoder, prompt_gen, self.prefix_ids, self.cont_ids, z, alpha)

        decoder.zero_grad()
        prompt_gen.zero_grad()
        loss().backward()
        for parameter, index in [(prompt_gen.proj.bias, (0,)), (decoder.head.weight, (2, 0))]:
            analytic = float(parameter.grad[index])
            numeric = _finiteDifference(loss, parameter, index)
            self.assertLess(abs(numeric - analytic), 1e-3 * abs(analytic) + 1e-8)


    def test_decoderTrainStep(self):
        """
        Test src.decoder:decoderTrainStep() updates both networks and warns once on truncation.
        """
        trainer = DecoderTrainer(self.decoder, self.prompt_gen, self.config)
        proj = self.prompt_gen.proj.weight.detach().clone()
        head = self.decoder.head.weight.detach().clone()
        loss = decoderTrainStep(trainer, self.prefix_ids, self.cont_ids, self.z)
        self.assertTrue(math.isfinite(loss))
        self.assertFalse(torch.equal(proj, self.prompt_gen.proj.weight))
        self.assertFalse(torch.equal(head, self.decoder.head.weight))

        #### Case 2 -- continuations that overflow max_len
        decoder, prompt_gen = buildDecoder(_tinyConfig(["decoder.max_len=8"]), self.vocab, 4,
                                           prompt_tokens=3)
        trainer = DecoderTrainer(decoder, prompt_gen, self.config)
        with mock.patch("builtins.print") as printed:
            decoderTrainStep(trainer, self.prefix_ids, self.cont_ids, self.z)
            decoderTrainStep(trainer, self.prefix_ids, self.cont_ids, self.z)
        self.assertEqual(1, printed.call_count)
        self.assertTrue(printed.call_args[0][0].startswith("WARNING:"))

        #### Case 3 -- only complete continuations are trained to stop
        trainer = DecoderTrainer(decoder, prompt_gen, self.config)
        with mock.patch("src.decoder.decoderLoss", wraps=decoderLoss) as wrapped, \
             mock.patch("builtins.print"):
            decoderTrainStep(trainer, self.prefix_ids, self.cont_ids, self.z)
            decoderTrainStep(trainer, self.prefix_ids, self.cont_ids[:, :1], self.z)
        self.assertFalse(wrapped.call_args_list[0][1]["eos"])
        self.assertEqual(2, wrapped.call_args_list[0][0][3].shape[1])
        self.assertTrue(wrapped.call_args_list[1][1]["eos"])


    def test_generate(self):
        """
        Test src.decoder:generate().
        """
        proposal = np.array([0.5, -0.5, 0.5, -0.5])
        first = generate(self.decoder, self.prompt_gen, self.vocab, ["a", "b"], proposal,
                         torchGenerator(3), self.schedule, max_tokens=6)
        second = generate(self.decoder, self.prompt_gen, self.vocab, ["a", "b"], proposal,
                          torchGenerator(3), self.schedule, max_tokens=6)
        self.assertListEqual(first, second)
        self.assertGreater(len(first), 0)
        self.assertLessEqual(len(first), 6)
        self.assertTrue(set(first) <= set("abcde"))

        #### Case 2 -- prefix-only baseline
        baseline = generate(self.decoder, None, self.vocab, ["a"], None, torchGenerator(3),
                            self.schedule, max_tokens=4)
        self.assertGreater(len(baseline), 0)

        #### Case 3 -- out of room: <bos> a b plus 3 soft tokens leaves one position
        decoder, prompt_gen = buildDecoder(_tinyConfig(["decoder.max_len=7"]), self.vocab, 4,
                                           prompt_tokens=3)
        with mock.patch("builtins.print") as printed:
            out = generate(decoder, prompt_gen, self.vocab, ["a", "b"], proposal,
                           torchGenerator(3), self.schedule, max_tokens=5)
        self.assertEqual(1, len(out))
        self.assertTrue(printed.call_args[0][0].startswith("WARNING:"))

        #### Case 4 -- proposal of the wrong size
        with self.assertRaises(DimensionMismatchError):
            generate(self.decoder, self.prompt_gen, self.vocab, ["a"], np.zeros(3),
                     torchGenerator(3), self.schedule)


    def test_firstTokenCounts(self):
        """
        Test src.decoder:firstTokenCounts().
        """
        counts = firstTokenCounts(self.decoder, self.prompt_gen, self.vocab, ["a"],
                                  np.ones(4) / 2.0, torchGenerator(4), self.schedule, 0.05, 20)
        self.assertEqual(20, int(np.sum(counts)))
        self.assertEqual(0, counts[BOS_ID])
        self.assertEqual(0, counts[EOS_ID])

        #### Case 2 -- draws that stop before any token are skipped
        outputs = iter([[], ["b"], [], ["b"], ["c"]])
        with mock.patch("src.decoder.generate", side_effect=lambda *a, **k: next(outputs)):
            counts = firstTokenCounts(self.decoder, self.prompt_gen, self.vocab, ["a"],
                                      np.ones(4) / 2.0, torchGenerator(4), self.schedule, 0.05, 5)
        self.assertEqual(3, int(np.sum(counts)))
        self.assertEqual(2, counts[self.vocab.index["b"]])
        self.assertEqual(1, counts[self.vocab.index["c"]])


    def test_saveLoad(self):
        """
        Test src.decoder:saveDecoder() and loadDecoder().
        """
        filepath = os.path.join(DATA_DIR, "decoder.ckpt")
        saveDecoder(filepath, self.decoder, self.prompt_gen, self.vocab, self.config)
        decoder, prompt_gen, vocab = loadDecoder(filepath)
        self.assertListEqual(self.vocab.symbols, vocab.symbols)
        with torch.no_grad():
            expected = self.decoder(self.prefix_ids, self.prompt_gen(self.z, self.alpha),
                                    self.cont_ids)
            actual = decoder(self.prefix_ids, prompt_gen(self.z, self.alpha), self.cont_ids)
        self.assertTrue(torch.equal(expected, actual))

        #### Case 2 -- baseline without a prompt generator
        saveDecoder(filepath, self.decoder, None, self.vocab, self.config)
        _, prompt_gen, _ = loadDecoder(filepath)
        self.assertIsNone(prompt_gen)


    def test_trainDecoder(self):
        """
        Test src.decoder:trainDecoder() and softPrompt() on a tiny corpus.
        """
        grammar = _smallGrammar()
        records = genCorpus(grammar, 20, numpyGenerator(8))
        embedder = Embedder(grammar.vocabulary, dim=8)

        decoder, prompt_gen, vocab = trainDecoder(records, embedder, self.config, verbose=False)
        self.assertEqual(len(grammar.vocabulary) + 2, len(vocab))
        self.assertEqual(2, prompt_gen.tokens)
        self.assertFalse(decoder.training)
        with torch.no_grad():
            soft = softPrompt(prompt_gen, embed(embedder, records[0].continuation), 0.05,
                              self.schedule, torchGenerator(9))
        self.assertEqual((1, 2, 16), tuple(soft.shape))

        #### Case 2 -- prefix-only baseline
        _, prompt_gen, _ = trainDecoder(records, embedder, self.config, prompt_tokens=0,
                                        verbose=False)
        self.assertIsNone(prompt_gen)


class TestMetrics(unittest.TestCase):
    """
    Test cases for functions in src.metrics.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        os.makedirs(DATA_DIR, exist_ok=True)
        self.generations = loadGenerations(os.path.join(TEST_FILES, "generations.txt"))


    def tearDown(self):
        """
        Necessary cleanup for these test cases.
        """
        _removeDataDir()


    def test_loadGenerations(self):
        """
        Test src.metrics:loadGenerations() and writeGenerations().
        """
        self.assertEqual(25, len(self.generations))
        self.assertListEqual(["0"], list(self.generations.prompts().keys()))
        self.assertEqual(0.9, self.generations.records[-1].scores["sentiment:pos"])

        filepath = os.path.join(DATA_DIR, "generations.txt")
        writeGenerations(self.generations, filepath)
        self.assertTrue(filecmp.cmp(os.path.join(TEST_FILES, "generations.txt"), filepath,
                                    shallow=False))

        #### Case 2 -- malformed input
        with self.assertRaises(GenerationFormatError):
            loadGenerations(os.path.join(TEST_FILES, "bad_generations.txt"))
        with self.assertRaises(GenerationFormatError):
            GenerationSet().add("0", [])


    def test_divMetric(self):
        """
        Test src.metrics:divMetric().
        """
        self.assertEqual(1.0, divMetric([["a", "b", "c", "d"]]))
        self.assertAlmostEqual(1.0 / 6.0, divMetric([["a", "a", "a", "a"]]))
        self.assertAlmostEqual(0.04 ** 3, divMetric(self.generations.continuations()))

        #### Case 2 -- short sequences are dropped with a warning
        with mock.patch("builtins.print") as printed:
            self.assertEqual(1.0, divMetric([["a", "b", "c", "d"], ["a", "b"]]))
        self.assertTrue(printed.call_args[0][0].startswith("WARNING:"))
        with mock.patch("builtins.print"):
            with self.assertRaises(EmptySampleSetError):
                divMetric([["a", "b"]])


    def test_distN(self):
        """
        Test src.metrics:distN().
        """
        self.assertAlmostEqual(0.04, distN(self.generations, 3))

        disjoint = GenerationSet()
        disjoint.add("0", ["a", "b", "c"])
        disjoint.add("0", ["d", "e", "f"])
        disjoint.add("1", ["a", "a", "a", "a"])
        self.assertAlmostEqual((1.0 + 0.5) / 2.0, distN(disjoint, 3))

        #### Case 2 -- prompt order and worker count do not matter
        reordered = GenerationSet(list(reversed(disjoint.records)))
        self.assertAlmostEqual(distN(disjoint, 3), distN(reordered, 3))
        self.assertEqual(distN(disjoint, 3), distN(disjoint, 3, num_procs=2))

        #### Case 3 -- nothing long enough
        short = GenerationSet()
        short.add("0", ["a", "b"])
        with mock.patch("builtins.print"):
            with self.assertRaises(EmptySampleSetError):
                distN(short, 3)


    def test_attributeRates(self):
        """
        Test src.metrics:attributeRates().
        """
        rates = attributeRates(self.generations, "sentiment:pos", 0.5)
        self.assertAlmostEqual(0.9, rates.avg_max)
        self.assertEqual(1.0, rates.rate)
        self.assertAlmostEqual(0.04, rates.mean_prop)
        self.assertEqual(0, rates.excluded)

        #### Case 2 -- nothing reaches the threshold
        zeros = GenerationSet()
        for prompt_id in ["0", "0", "1"]:
            zeros.add(prompt_id, ["a"], {"sentiment:pos": 0.0})
        self.assertEqual((0.0, 0.0, 0.0, 0), tuple(attributeRates(zeros)))

        #### Case 3 -- a higher threshold never raises the rates
        low = attributeRates(self.generations, threshold=0.1)
        high = attributeRates(self.generations, threshold=0.95)
        self.assertGreaterEqual(low.rate, high.rate)
        self.assertGreaterEqual(low.mean_prop, high.mean_prop)
        self.assertEqual(0.0, high.rate)

        #### Case 4 -- the oracle fills gaps and failures are excluded
        grammar = _smallGrammar()
        mixed = GenerationSet()
        mixed.add("0", ["p0", "p1", "p2", "p3"] * 6)
        mixed.add("0", ["zzz"])
        with mock.patch("builtins.print"):
            rates = attributeRates(mixed, "sentiment:pos", oracle=grammarOracle(grammar,
                                                                                "sentiment:pos"))
        self.assertEqual(1, rates.excluded)
        self.assertEqual(1.0, rates.rate)

        with mock.patch("builtins.print"):
            with self.assertRaises(EmptySampleSetError):
                attributeRates(mixed, "topic:A")
        with self.assertRaises(ValueError):
            splitAttributeKey("sentiment")


    def test_similarity(self):
        """
        Test src.metrics:embeddingSimilarity(), similarityBaseline() and rescaleSimilarity().
        """
        grammar = _smallGrammar()
        embedder = Embedder(grammar.vocabulary, dim=64)
        generations = GenerationSet()
        generations.add("0", ["p0", "f1", "a2"])
        generations.add("1", ["n3", "b0"])
        proposals = embedMany(embedder, generations.continuations())
        self.assertAlmostEqual(1.0, embeddingSimilarity(generations, proposals, embedder))
        self.assertAlmostEqual(1.0, embeddingSimilarity(generations, proposals, embedder, 0.2))
        with self.assertRaises(MissingProposalError):
            embeddingSimilarity(generations, proposals[:1], embedder)

        self.assertAlmostEqual(0.375, rescaleSimilarity(0.5, 0.2))

        #### Case 2 -- random unit vectors are uncorrelated on average
        vectors = numpyGenerator(1).standard_normal((100, 64))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        baseline = similarityBaseline(vectors, numpyGenerator(2), pairs=20000)
        self.assertLess(abs(baseline), 0.02)
        with self.assertRaises(EmptySampleSetError):
            similarityBaseline(vectors[:1], numpyGenerator(2))


    def test_evaluate(self):
        """
        Test src.metrics:evaluate() with the grammar oracle.
        """
        grammar = _smallGrammar()
        records = genCorpus(grammar, 12, numpyGenerator(9))
        embedder = Embedder(grammar.vocabulary, dim=64)
        generations = GenerationSet()
        for prompt_id in [0, 0, 3, 5]:
            generations.add(prompt_id, records[prompt_id + 1].continuation)
        proposals = embedMany(embedder, generations.continuations())

        metrics = evaluate(generations, seed=0, grammar=grammar, records=records,
                           proposals=proposals, embedder=embedder)
        self.assertListEqual(["div", "dist_3", "avg_max", "rate", "mean_prop", "excluded",
                              "similarity", "similarity_rescaled", "perplexity"],
                             list(metrics.keys()))
        expected = np.mean([truePerplexity(grammar, records[i + 1].continuation,
                                           records[i].prefix) for i in [0, 0, 3, 5]])
        self.assertAlmostEqual(expected, metrics["perplexity"])
        self.assertAlmostEqual(1.0, metrics["similarity"])
        self.assertEqual(0, metrics["excluded"])

        #### Case 2 -- same numbers from a worker pool
        pooled = evaluate(generations, seed=0, grammar=grammar, records=records,
                          proposals=proposals, embedder=embedder, num_procs=2)
        self.assertEqual(metrics, pooled)

        #### Case 3 -- generations alone
        metrics = evaluate(self.generations, seed=0)
        self.assertListEqual(["div", "dist_3", "avg_max", "rate", "mean_prop", "excluded"],
                             list(metrics.keys()))
        with self.assertRaises(EmptySampleSetError):
            evaluate(GenerationSet(), seed=0)


    def test_reportLines(self):
        """
        Test src.metrics:reportLines() and writeReport().
        """
        metrics = OrderedDict([("div", 1.0), ("excluded", 0)])
        lines = reportLines(metrics, RunConfig())
        self.assertEqual("div\t1", lines[0])
        self.assertEqual("excluded\t0", lines[1])
        self.assertEqual("config.adaptive.bins\t64", lines[2])

        filepath = os.path.join(DATA_DIR, "report.txt")
        writeReport(filepath, metrics)
        self.assertEqual(OrderedDict([("div", "1"), ("excluded", "0")]), _readReport(filepath))


class TestVerify(unittest.TestCase):
    """
    Test cases for functions in src.verify.
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        self.two_class = loadGMMSpec(os.path.join(FIXTURES, "two_class.gmm"))


    def test_totalVariation(self):
        """
        Test src.verify:totalVariation().
        """
        self.assertEqual(0.5, totalVariation([0.5, 0.5], [1.0, 0.0]))
        self.assertEqual(0.0, totalVariation([0.2, 0.8], [0.2, 0.8]))


    def test_checkScore(self):
        """
        Test src.verify:checkScore() on both fixtures.
        """
        for name in ["two_class.gmm", "three_component.gmm"]:
            gmm = loadGMMSpec(os.path.join(FIXTURES, name))
            self.assertLess(checkScore(gmm, Schedule(), torchGenerator(0), points=16), 1e-5)


    def test_conditionalClassWeights(self):
        """
        Test src.verify:conditionalClassWeights() on well separated classes.
        """
        weights = conditionalClassWeights(self.two_class, 0, torchGenerator(1), draws=20000)
        self.assertGreater(float(weights[0]), 0.999)
        self.assertAlmostEqual(1.0, float(torch.sum(weights)))


    def test_verifyFixture(self):
        """
        Test src.verify:verifyFixture() runs every applicable check.
        """
        config = _tinyConfig(["sampler.steps=10"])
        filepath = os.path.join(FIXTURES, "three_component.gmm")
        with mock.patch("builtins.print") as printed:
            results = verifyFixture(filepath, config, samples=200, seed=0)
        self.assertListEqual(["score_fd_rel_error", "occupancy_tv", "mean_bias",
                              "variance_rel_error"], [result.name for result in results])
        self.assertTrue(results[0].passed)
        messages = [call[0][0] for call in printed.call_args_list]
        self.assertTrue(any("guided check skipped" in message for message in messages))

        #### Case 2 -- one component per class gets the guided check too
        with mock.patch("builtins.print"):
            results = verifyFixture(os.path.join(FIXTURES, "two_class.gmm"), config, samples=200,
                                    seed=0)
        self.assertEqual("guided_class_tv", results[-1].name)

        #### Case 3 -- sampling checks use verify.v_interp, not the generation setting
        for value in [1.0, 0.5]:
            config = _tinyConfig(["sampler.steps=5", "verify.v_interp={}".format(value)])
            with mock.patch("src.verify.sample", wraps=sample) as wrapped, \
                 mock.patch("builtins.print"):
                verifyFixture(os.path.join(FIXTURES, "two_class.gmm"), config, samples=50,
                              seed=0)
            self.assertEqual(2, wrapped.call_count)
            for call in wrapped.call_args_list:
                self.assertEqual(value, call[0][3].v_interp)


    def test_verifyFixture_tolerances(self):
        """
        Test src.verify:verifyFixture() passes every check at 1e4 samples and 50 steps.
        """
        config = RunConfig()
        self.assertEqual(50, config["sampler.steps"])
        with mock.patch("builtins.print"):
            results = verifyFixture(os.path.join(FIXTURES, "two_class.gmm"), config,
                                    samples=10000, seed=0)
        self.assertListEqual(["score_fd_rel_error", "occupancy_tv", "mean_bias",
                              "variance_rel_error", "guided_class_tv"],
                             [result.name for result in results])
        for result in results:
            self.assertTrue(result.passed, "{} = {} (limit {})".format(
                result.name, result.value, result.limit))


class TestCLI(unittest.TestCase):
    """
    Test cases for main:cliMain().
    """
    def setUp(self):
        """
        Necessary setup for test cases.
        """
        os.makedirs(DATA_DIR, exist_ok=True)
        self.corpus = os.path.join(DATA_DIR, "corpus.txt")
        self.grammar = os.path.join(DATA_DIR, "grammar.txt")


    def tearDown(self):
        """
        Necessary cleanup for these test cases.
        """
        _removeDataDir()


    def _run(self, *argv):
        return _quietCli(argv)


    def test_usage(self):
        """
        Test main:cliMain() usage errors.
        """
        self.assertEqual(2, self._run())
        self.assertEqual(2, self._run("train-everything"))
        self.assertEqual(2, self._run("eval", "--bogus-flag"))
        self.assertEqual(2, self._run("generate", "a", "b", "c", "d", "--mc-form", "mode"))


    def test_eval(self):
        """
        Test main:cliMain() eval on generation fixtures.
        """
        report = os.path.join(DATA_DIR, "report.txt")
        generations = os.path.join(TEST_FILES, "generations.txt")
        self.assertEqual(0, self._run("eval", generations, report))
        values = _readReport(report)
        self.assertEqual("6.4e-05", values["div"])
        self.assertEqual("0.04", values["dist_3"])
        self.assertEqual("0.9", values["avg_max"])
        self.assertEqual("1", values["rate"])
        self.assertEqual("0.04", values["mean_prop"])
        self.assertEqual("0", values["excluded"])
        self.assertEqual("64", values["config.adaptive.bins"])

        #### Case 2 -- reruns are byte-identical
        again = os.path.join(DATA_DIR, "report_again.txt")
        self.assertEqual(0, self._run("eval", generations, again))
        self.assertTrue(filecmp.cmp(report, again, shallow=False))

        #### Case 3 -- one short continuation
        self.assertEqual(0, self._run("eval", os.path.join(TEST_FILES, "generations_short.txt"),
                                      report))
        self.assertEqual("0.166666666667", _readReport(report)["div"])

        #### Case 4 -- bad input
        self.assertEqual(1, self._run("eval", os.path.join(DATA_DIR, "missing.txt"), report))
        self.assertEqual(1, self._run("eval", generations, report, "--corpus", self.corpus))
        self.assertEqual(1, self._run("eval", generations, report, "--config",
                                      os.path.join(TEST_FILES, "bad_config.txt")))
        self.assertEqual(1, self._run("eval", os.path.join(TEST_FILES, "bad_generations.txt"),
                                      report))


    def test_verifyOracle_errors(self):
        """
        Test main:cliMain() verify-oracle input checks.
        """
        self.assertEqual(1, self._run("verify-oracle", os.path.join(DATA_DIR, "missing.gmm")))
        self.assertEqual(1, self._run("verify-oracle", os.path.join(TEST_FILES, "bad.gmm")))
        self.assertEqual(1, self._run("verify-oracle", "--samples", "0"))


    def test_parseTarget(self):
        """
        Test main:_parseTarget().
        """
        self.assertEqual(("pos", 1.0), _parseTarget("pos"))
        self.assertEqual(("pos", 0.5), _parseTarget("pos:0.5"))
        self.assertEqual(("neg", 0.0), _parseTarget("neg:0"))
        self.assertEqual(("a:b", 2.0), _parseTarget("a:b:2"))
        for text in ["pos:", "pos:x", "pos:-0.5", "pos:inf", "pos:nan"]:
            with self.assertRaises(AssertionError):
                _parseTarget(text)


    def test_genCorpus(self):
        """
        Test main:cliMain() gen-corpus is reproducible.
        """
        self.assertEqual(0, self._run("gen-corpus", self.corpus, self.grammar, "--config",
                                      TINY_CONFIG))
        other = os.path.join(DATA_DIR, "corpus_again.txt")
        self.assertEqual(0, self._run("gen-corpus", other, self.grammar, "--config", TINY_CONFIG))
        self.assertTrue(filecmp.cmp(self.corpus, other, shallow=False))
        self.assertEqual(60, len(loadCorpus(self.corpus)))

        self.assertEqual(1, self._run("gen-corpus", self.corpus, self.grammar, "--size", "0"))


    def test_pipeline(self):
        """
        Test main:cliMain() from corpus to report on the tiny config.
        """
        common = ["--config", TINY_CONFIG]
        path = lambda name: os.path.join(DATA_DIR, name)
        self.assertEqual(0, self._run("gen-corpus", self.corpus, self.grammar, *common))

        #### Training
        self.assertEqual(0, self._run("train-diffusion", self.corpus, self.grammar,
                                      path("denoiser.ckpt"), *common))
        self.assertEqual(0, self._run("train-diffusion", self.corpus, self.grammar,
                                      path("denoiser_again.ckpt"), *common))
        self.assertTrue(filecmp.cmp(path("denoiser.ckpt"), path("denoiser_again.ckpt"),
                                    shallow=False))
        self.assertEqual(0, self._run("train-decoder", self.corpus, self.grammar,
                                      path("decoder.ckpt"), *common))
        self.assertEqual(0, self._run("train-decoder", self.corpus, self.grammar,
                                      path("baseline.ckpt"), "--baseline", *common))
        self.assertEqual(0, self._run("train-classifier", self.corpus, self.grammar,
                                      path("sentiment.ckpt"), *common))
        self.assertEqual(1, self._run("train-classifier", self.corpus, self.grammar,
                                      path("colour.ckpt"), "--attribute", "colour", *common))

        #### Generation
        self.assertEqual(0, self._run("generate", self.corpus, self.grammar, path("decoder.ckpt"),
                                      path("guided.txt"), "--denoiser", path("denoiser.ckpt"),
                                      "--classifier", path("sentiment.ckpt"), "--target", "pos",
                                      "--guidance-s", "1.0", "--cfg-w", "2.0", "--prompts", "3",
                                      *common))
        generations = loadGenerations(path("guided.txt"))
        self.assertEqual(9, len(generations))
        self.assertEqual((9, 8), np.load(path("guided.txt.proposals.npy")).shape)

        #### Case 2 -- per-classifier weights; weight 0 switches that classifier off
        guided = ["--denoiser", path("denoiser.ckpt"), "--guidance-s", "1.0", "--cfg-w", "2.0",
                  "--prompts", "2"] + common
        self.assertEqual(0, self._run("generate", self.corpus, self.grammar, path("decoder.ckpt"),
                                      path("unguided.txt"), *guided))
        self.assertEqual(0, self._run("generate", self.corpus, self.grammar, path("decoder.ckpt"),
                                      path("zero.txt"), "--classifier", path("sentiment.ckpt"),
                                      "--target", "pos:0", *guided))
        self.assertEqual(0, self._run("generate", self.corpus, self.grammar, path("decoder.ckpt"),
                                      path("half.txt"), "--classifier", path("sentiment.ckpt"),
                                      "--target", "pos:0.5", *guided))
        unguided = np.load(path("unguided.txt.proposals.npy"))
        self.assertTrue(np.array_equal(unguided, np.load(path("zero.txt.proposals.npy"))))
        self.assertFalse(np.array_equal(unguided, np.load(path("half.txt.proposals.npy"))))
        for target in ["pos:-1", "pos:heavy"]:
            self.assertEqual(1, self._run("generate", self.corpus, self.grammar,
                                          path("decoder.ckpt"), path("bad.txt"), "--classifier",
                                          path("sentiment.ckpt"), "--target", target, *guided))

        #### Case 3 -- other proposal sources and bad arguments
        self.assertEqual(0, self._run("generate", self.corpus, self.grammar,
                                      path("baseline.ckpt"), path("reference.txt"),
                                      "--proposal-from", "reference", "--prompts", "2",
                                      *common))
        self.assertEqual(1, self._run("generate", self.corpus, self.grammar, path("decoder.ckpt"),
                                      path("bad.txt"), "--classifier", path("sentiment.ckpt"),
                                      *common))
        self.assertEqual(1, self._run("generate", self.corpus, self.grammar, path("decoder.ckpt"),
                                      path("bad.txt"), *common))

        #### Evaluation
        self.assertEqual(0, self._run("eval", path("guided.txt"), path("report.txt"), "--corpus",
                                      self.corpus, "--grammar", self.grammar, *common))
        values = _readReport(path("report.txt"))
        for key in ["div", "dist_3", "avg_max", "rate", "mean_prop", "excluded", "similarity",
                    "similarity_rescaled", "perplexity"]:
            self.assertIn(key, values)
        self.assertEqual("8", values["config.embed.dim"])

        self.assertEqual(0, self._run("eval", path("guided.txt"), path("reference_report.txt"),
                                      "--corpus", self.corpus, "--grammar", self.grammar,
                                      "--reference", *common))
        self.assertEqual("1", _readReport(path("reference_report.txt"))["similarity"])


@unittest.skipUnless(SLOW, "set DGLM_SLOW=1 to run the acceptance checks")
class TestPipelineAcceptance(unittest.TestCase):
    """
    Long-running statistical checks on a pipeline trained through the command line.
    """
    @classmethod
    def setUpClass(cls):
        cls.work_dir = os.path.join(DATA_DIR, "acceptance")
        os.makedirs(cls.work_dir, exist_ok=True)
        cls.common = ["--config", ACCEPTANCE_CONFIG]
        cls.corpus = cls.path("corpus.txt")
        cls.grammar = cls.path("grammar.txt")
        for argv in [
            ["gen-corpus", cls.corpus, cls.grammar],
            ["train-diffusion", cls.corpus, cls.grammar, cls.path("denoiser.ckpt")],
            ["train-decoder", cls.corpus, cls.grammar, cls.path("decoder.ckpt")],
            ["train-decoder", cls.corpus, cls.grammar, cls.path("baseline.ckpt"), "--baseline"],
            ["train-classifier", cls.corpus, cls.grammar, cls.path("sentiment.ckpt")],
        ]:
            assert _quietCli(argv + cls.common) == 0, "'{}' failed".format(argv[0])


    @classmethod
    def tearDownClass(cls):
        _removeDataDir()


    @classmethod
    def path(cls, name):
        return os.path.join(cls.work_dir, name)


    def _report(self, name, *flags):
        """
        Generate with the given flags, evaluate against the corpus, and return the report.
        """
        generations = self.path(name + ".txt")
        self.assertEqual(0, _quietCli(["generate", self.corpus, self.grammar,
                                       self.path("decoder.ckpt"), generations] +
                                      list(flags) + self.common))
        report = self.path(name + ".report.txt")
        self.assertEqual(0, _quietCli(["eval", generations, report, "--corpus", self.corpus,
                                       "--grammar", self.grammar] + self.common))
        return _readReport(report)


    def test_guidanceControl(self):
        """
        Test target-attribute proportion grows with s while perplexity stays close.
        """
        reports = [self._report("guided_{}".format(scale), "--denoiser", self.path("denoiser.ckpt"),
                                "--classifier", self.path("sentiment.ckpt"), "--target", "pos",
                                "--guidance-s", str(scale))
                   for scale in [0, 5, 10, 20]]
        proportions = [float(report["mean_prop"]) for report in reports]
        for before, after in zip(proportions, proportions[1:]):
            self.assertGreaterEqual(after, before)
        self.assertLessEqual(proportions[0], 0.60)
        self.assertGreaterEqual(proportions[-1], 0.90)

        unguided = float(reports[0]["perplexity"])
        self.assertLessEqual(float(reports[-1]["perplexity"]), 1.25 * unguided)


    def test_cfgTrend(self):
        """
        Test topic agreement between prompt and continuation does not fall as the CFG weight
        grows.
        """
        records = loadCorpus(self.corpus)
        agreements = list()
        for cfg_w in [1.0, 1.5, 2.0, 3.0]:
            generations = self.path("cfg_{}.txt".format(cfg_w))
            self.assertEqual(0, _quietCli(["generate", self.corpus, self.grammar,
                                           self.path("decoder.ckpt"), generations, "--denoiser",
                                           self.path("denoiser.ckpt"), "--cfg-w", str(cfg_w),
                                           "--prompts", "40"] + self.common))
            agreements.append(np.mean([
                record.scores["topic:{}".format(records[int(record.prompt_id)].attributes["topic"])]
                for record in loadGenerations(generations).records
            ]))
        inversions = [(before, after) for before, after in zip(agreements, agreements[1:])
                      if after < before]
        self.assertLessEqual(len(inversions), 1)
        for before, after in inversions:
            self.assertLessEqual(before - after, 0.01)


    def test_noiseKnob(self):
        """
        Test proposal adherence falls as decoding noise rises.
        """
        similarities = [
            float(self._report("noise_{}".format(noise), "--proposal-from", "reference",
                               "--noise", str(noise))["similarity"])
            for noise in [0.0, 0.05, 0.2, 1.0]
        ]
        inversions = [(before, after) for before, after in zip(similarities, similarities[1:])
                      if after >= before]
        self.assertLessEqual(len(inversions), 1)
        for before, after in inversions:
            self.assertLessEqual(after - before, 0.01)


    def test_fullNoiseIgnoresProposal(self):
        """
        Test src.decoder:generate() at noise variance 1 draws first tokens independently of the
        proposal.
        """
        decoder, prompt_gen, vocab = loadDecoder(self.path("decoder.ckpt"))
        records = loadCorpus(self.corpus)
        config = loadConfig(ACCEPTANCE_CONFIG)
        embedder = Embedder(vocab.symbols[2:], dim=config["embed.dim"], seed=config["embed.seed"])
        schedule = Schedule(kind=config["augment.kind"], shift=config["augment.shift"])

        table = np.stack([
            firstTokenCounts(decoder, prompt_gen, vocab, records[0].prefix,
                             embed(embedder, records[i].continuation), torchGenerator(i),
                             schedule, 1.0, 2000)
            for i in [1, 2]
        ])
        table = table[:, np.sum(table, axis=0) > 0]
        _, p_value, _, _ = chi2_contingency(table)
        self.assertGreater(p_value, 0.01)


    def _heldout(self, size):
        grammar = loadGrammar(self.grammar)
        config = loadConfig(ACCEPTANCE_CONFIG)
        embedder = Embedder(grammar.vocabulary, dim=config["embed.dim"], seed=config["embed.seed"])
        return grammar, genCorpus(grammar, size, numpyGenerator(4242)), embedder


    def test_pureNoiseMatchesBaseline(self):
        """
        Test src.decoder:decoderLoss() at noise variance 1 comes within 5% of the prefix-only
        baseline on held-out records.
        """
        _, records, embedder = self._heldout(500)
        decoder, prompt_gen, vocab = loadDecoder(self.path("decoder.ckpt"))
        baseline, _, _ = loadDecoder(self.path("baseline.ckpt"))
        config = loadConfig(ACCEPTANCE_CONFIG)
        schedule = Schedule(kind=config["augment.kind"], shift=config["augment.shift"])

        prefix_ids, cont_ids = encodeRecords(vocab, records)
        x_cont = torch.as_tensor(embedMany(embedder, [r.continuation for r in records]),
                                 dtype=torch.float32)
        alpha, sigma = alphaSigmaOfLambda(lambdaOfNoiseVar(schedule, 1.0))
        eps = torch.randn(x_cont.shape, generator=torchGenerator(5), dtype=torch.float32)
        z = alpha * x_cont + sigma * eps
        with torch.no_grad():
            noised = float(decoderLoss(decoder, prompt_gen, prefix_ids, cont_ids, z,
                                       torch.full((len(records),), alpha, dtype=torch.float32)))
            prefix_only = float(decoderLoss(baseline, None, prefix_ids, cont_ids, None, None))
        self.assertLess(abs(noised - prefix_only), 0.05 * prefix_only)


    def test_positiveProposal(self):
        """
        Test src.decoder:generate() follows a held-out positive proposal at noise variance 0.05.
        """
        grammar, records, embedder = self._heldout(200)
        record = next(r for r in records if r.attributes["sentiment"] == "pos")
        decoder, prompt_gen, vocab = loadDecoder(self.path("decoder.ckpt"))
        config = loadConfig(ACCEPTANCE_CONFIG)
        schedule = Schedule(kind=config["augment.kind"], shift=config["augment.shift"])
        oracle = grammarOracle(grammar, "sentiment:pos")
        proposal = embed(embedder, record.continuation)

        positives = 0
        for draw in range(25):
            tokens = generate(decoder, prompt_gen, vocab, record.prefix, proposal,
                              torchGenerator(draw), schedule, noise_var=0.05,
                              max_tokens=config["generate.max_tokens"])
            positives += int(len(tokens) > 0 and oracle(tokens) >= config["eval.threshold"])
        self.assertGreaterEqual(positives, 20)


    def test_verifyOracle(self):
        """
        Test src.verify:verifyOracle() passes on every bundled fixture.
        """
        fixtures = sorted(os.path.join(FIXTURES, name) for name in os.listdir(FIXTURES))
        self.assertTrue(verifyOracle(fixtures, RunConfig(), samples=10000, seed=0, verbose=False))


#### MAIN ##########################################################################################
if __name__ == "__main__":
    unittest.main(warnings="ignore")
