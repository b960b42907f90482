#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import os
import sys


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
import torch


#### GLOBALS #######################################################################################
# Number of significant digits written for every float in text outputs. repr() round-trips
# exactly, but fixed formatting keeps reports aligned and byte-stable across platforms.
FLOAT_FORMAT = "{:.12g}"


#### CLASSES #######################################################################################
class DGLMError(Exception):
    """
    Base class for every error raised by this project. main.py maps it to exit code 1.
    """
    pass


class DimensionMismatchError(DGLMError, ValueError):
    """
    Exception raised when two vectors that must share a dimension do not.
    """
    pass


#### FUNCTIONS #####################################################################################
def canonicalize(path):
    """
    Helper function to canonicalize filepaths.

    GIVEN:
      path (str) -- a filepath to canonicalize

    RETURN:
      ____ (str) -- a canonicalized filepath
    """
    return os.path.realpath(path)


def doesPathExist(path):
    """
    Helper function to determine if a filepath exists.

    GIVEN:
      path (str) -- a filepath to check for existence

    RETURN:
      ____ (bool) -- True if the given filepath exists, False otherwise
    """
    return os.path.exists(path)


def getFilenames(top_dir):
    """
    Get the names of files, one level deep, sorted so callers see a stable order.
    """
    return sorted([d[2] for d in os.walk(top_dir)][0])


def overwriteFile(old_file, new_file):
    """
    Overwrite old_file with new_file.

    GIVEN:
      old_file (str) -- path to file to overwrite
      new_file (str) -- path to file to overwrite old_file with
    """
    # Delete old_file
    if doesPathExist(old_file):
        os.remove(old_file)

    # Rename new_file to old_file
    os.rename(new_file, old_file)


def writeText(filepath, text):
    """
    Write text to filepath through a temporary file, so a crash never leaves a half-written
    output behind.

    GIVEN:
      filepath (str) -- destination path
      text (str) -- full file contents
    """
    tmp_file = filepath + ".tmp"
    with open(tmp_file, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    overwriteFile(filepath, tmp_file)


def formatFloat(value):
    """
    Format a float for text reports and data files.
    """
    return FLOAT_FORMAT.format(float(value))


def deriveSeed(seed, *keys):
    """
    Derive an independent integer seed from a base seed and any number of integer keys, e.g.
    (seed, prompt_id). Used wherever results must not depend on batching or ordering.

    GIVEN:
      seed (int) -- base seed
      keys (int) -- additional integer keys

    RETURN:
      ____ (int) -- a 63-bit seed
    """
    state = np.random.SeedSequence([int(seed)] + [int(k) for k in keys]).generate_state(2)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def torchGenerator(seed):
    """
    Build a CPU torch.Generator seeded with the given seed.
    """
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def numpyGenerator(seed):
    """
    Build a numpy Generator seeded with the given seed.
    """
    return np.random.default_rng(int(seed))


def checkDim(name, vector, dim):
    """
    Raise DimensionMismatchError unless the last axis of vector has length dim.

    GIVEN:
      name (str) -- name used in the error message
      vector (...) -- array or tensor
      dim (int) -- expected trailing dimension
    """
    if vector.shape[-1] != dim:
        raise DimensionMismatchError(
            "{} has trailing dimension {}, expected {}.".format(name, vector.shape[-1], dim))


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
