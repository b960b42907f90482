#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import os
import sys
from collections import OrderedDict


#### PACKAGE IMPORTS ###############################################################################
from src.helpers import DGLMError


#### GLOBALS #######################################################################################
# Every key a run may set. Values double as type declarations: a key whose default is an int
# only accepts ints, and so on.
DEFAULT_CONFIG = OrderedDict([
    # Noise schedule used for diffusion training and sampling
    ("schedule.kind", "cosine"),
    ("schedule.shift", 1.0),
    ("schedule.lambda_min", -15.0),
    ("schedule.lambda_max", 15.0),
    # Gaussian noise augmentation schedule for the decoder's proposal conditioning
    ("augment.kind", "scaled_cosine"),
    ("augment.shift", 3.0),
    # Denoising score matching weighting
    ("loss.weighting", "hybrid"),
    ("loss.scale", 2.4),
    # Adaptive noise-level importance sampler
    ("adaptive.bins", 64),
    ("adaptive.decay", 0.99),
    ("adaptive.floor", 0.001),
    # DDPM sampler
    ("sampler.v_interp", 0.2),
    ("sampler.steps", 50),
    ("sampler.t_min", 0.001),
    # Guidance
    ("guidance.cfg_w", 1.0),
    ("guidance.s", 0.0),
    ("guidance.mc_n", 32),
    ("guidance.mc_form", "paper_literal"),
    ("guidance.jacobian", "full"),
    # Denoiser architecture and training
    ("model.hidden", 256),
    ("model.layers", 4),
    ("model.time_dim", 64),
    ("train.lr", 0.001),
    ("train.steps", 20000),
    ("train.batch_size", 256),
    ("train.mask_prob", 0.1),
    ("train.warmup", 1000),
    ("train.weight_decay", 0.1),
    ("train.beta2", 0.999),
    ("train.seed", 0),
    # Semantic embedder
    ("embed.dim", 64),
    ("embed.seed", 1234),
    # Toy grammar and corpus
    ("grammar.seed", 7),
    ("grammar.lexicon_size", 24),
    ("grammar.fillers", 104),
    ("grammar.prefix_len", 8),
    ("grammar.cont_len", 16),
    ("grammar.attr_mass", 0.55),
    ("grammar.leak_mass", 0.04),
    ("corpus.size", 20000),
    # Decoder and prompt generator
    ("decoder.width", 128),
    ("decoder.layers", 4),
    ("decoder.heads", 4),
    ("decoder.prompt_tokens", 8),
    ("decoder.prompt_layers", 2),
    ("decoder.max_len", 96),
    ("decoder.lr", 0.0003),
    ("decoder.steps", 6000),
    ("decoder.batch_size", 64),
    ("decoder.warmup", 500),
    ("decoder.weight_decay", 0.02),
    ("decoder.beta2", 0.99),
    # Generation and evaluation
    ("generate.noise", 0.05),
    ("generate.num", 25),
    ("generate.max_tokens", 32),
    ("eval.threshold", 0.5),
    # Exact-oracle checks sample at the upper DDPM step variance
    ("verify.v_interp", 1.0),
])
CHOICES = {
    "schedule.kind": ["cosine", "scaled_cosine"],
    "augment.kind": ["cosine", "scaled_cosine"],
    "loss.weighting": ["lognormal", "hybrid"],
    "guidance.mc_form": ["paper_literal", "likelihood_mean"],
    "guidance.jacobian": ["full", "scaled_identity"],
}
SEED_ENV = "SEED"


#### CLASSES #######################################################################################
class UnknownConfigKeyError(DGLMError):
    """
    Exception raised when a config file or override names a key that is not in DEFAULT_CONFIG.
    """
    pass


class ConfigValueError(DGLMError):
    """
    Exception raised when a config value cannot be parsed as the key's type or choice set.
    """
    pass


class RunConfig(object):
    """
    Flat key=value configuration for a run. Lookups use the full dotted key, e.g.
    config["train.lr"].
    """
    def __init__(self, values=None):
        self._values = OrderedDict(DEFAULT_CONFIG)
        for key, value in (values or dict()).items():
            self.set(key, value)


    def set(self, key, value):
        """
        Set a single key, parsing strings into the key's type.
        """
        if key not in DEFAULT_CONFIG:
            raise UnknownConfigKeyError("Unknown config key '{}'.".format(key))
        self._values[key] = _parseValue(key, value)


    def __getitem__(self, key):
        if key not in self._values:
            raise UnknownConfigKeyError("Unknown config key '{}'.".format(key))
        return self._values[key]


    def items(self):
        return sorted(self._values.items())


    def lines(self):
        """
        The resolved config, one 'key=value' line per key, sorted by key.
        """
        return ["{}={}".format(key, value) for key, value in self.items()]


#### FUNCTIONS #####################################################################################
def _parseValue(key, value):
    """
    Parse a raw value into the type of DEFAULT_CONFIG[key].

    GIVEN:
      key (str) -- config key
      value (str|int|float) -- raw value

    RETURN:
      parsed (int|float|str) -- typed value
    """
    default = DEFAULT_CONFIG[key]
    try:
        if isinstance(default, int):
            if isinstance(value, str):
                parsed = int(value.strip())
            elif float(value).is_integer():
                parsed = int(value)
            else:
                raise ValueError(value)
        elif isinstance(default, float):
            parsed = float(value)
        else:
            parsed = str(value).strip()
    except ValueError:
        raise ConfigValueError("Config key '{}' expects {}, got '{}'.".format(
            key, type(default).__name__, value))

    if key in CHOICES and parsed not in CHOICES[key]:
        raise ConfigValueError("Config key '{}' must be one of {}, got '{}'.".format(
            key, CHOICES[key], parsed))

    return parsed


def loadConfig(filepath=None, overrides=None, seed=None):
    """
    Build a RunConfig from a config file, key=value overrides, and the seed precedence rule:
    --seed flag > SEED environment variable > train.seed from the file.

    GIVEN:
      filepath (str) -- path to a key=value config file, or None for defaults only
      overrides (list) -- list of 'key=value' strings applied after the file
      seed (int) -- seed from the command line, or None

    RETURN:
      config (RunConfig) -- resolved configuration
    """
    config = RunConfig()

    if filepath is not None:
        with open(filepath, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if line == "":
                    continue
                if "=" not in line:
                    raise ConfigValueError("Line {} of '{}' is not a key=value pair.".format(
                        line_number, filepath))
                key, value = line.split("=", 1)
                config.set(key.strip(), value.strip())

    for override in (overrides or list()):
        if "=" not in override:
            raise ConfigValueError("Override '{}' is not a key=value pair.".format(override))
        key, value = override.split("=", 1)
        config.set(key.strip(), value.strip())

    # Seed precedence
    if seed is not None:
        config.set("train.seed", seed)
    elif os.environ.get(SEED_ENV, "") != "":
        config.set("train.seed", os.environ[SEED_ENV])

    return config


def printConfig(config):
    """
    Log the resolved config verbatim.
    """
    print("Resolved config:")
    for line in config.lines():
        print("\t{}".format(line))


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
