#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import math
import sys


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from src.checkpoint import loadCheckpoint, loadModuleState, saveModule
from src.diffusion import Prediction, WeightingFn, dsmVLoss, forwardDiffuseLambda
from src.helpers import DGLMError, checkDim, deriveSeed, numpyGenerator, torchGenerator
from src.layers import AdaptiveRMSNorm, SwiGLU, TimeFeatures
from src.optim import buildOptimizer, optimizerStep
from src.schedules import adaptiveSample, adaptiveUpdate, newAdaptiveState


#### GLOBALS #######################################################################################
HELDOUT_FRACTION = 0.05
HELDOUT_LAMBDAS = 16
NUM_EVALS = 10
CHECKPOINT_KIND = "denoiser"


#### CLASSES #######################################################################################
class NonFiniteLossError(DGLMError):
    """
    Exception raised when a training step produces a NaN or infinite loss.
    """
    pass


class ResidualBlock(nn.Module):
    """
    x + SwiGLU(AdaptiveRMSNorm(x, time)).
    """
    def __init__(self, hidden, cond_dim):
        super().__init__()
        self.norm = AdaptiveRMSNorm(hidden, cond_dim)
        self.mlp = SwiGLU(hidden, 2 * hidden)


    def forward(self, x, cond):
        return x + self.mlp(self.norm(x, cond))


class Denoiser(nn.Module):
    """
    v-prediction network s_theta(z_t; lambda; x_pref). The input projection sees
    z ++ prefix ++ time features; a stack of residual blocks with adaptive RMSNorm on the time
    features follows; a final adaptive norm and linear map return to dimension d. A masked or
    missing prefix is replaced by the learnable null_embedding.
    """
    def __init__(self, dim=64, hidden=256, layers=4, time_dim=64, lambda_min=-15.0,
                 lambda_max=15.0):
        super().__init__()
        self.dim = dim
        self.hidden = hidden
        self.num_layers = layers
        self.time_dim = time_dim
        self.lambda_min = float(lambda_min)
        self.lambda_max = float(lambda_max)

        self.null_embedding = nn.Parameter(torch.zeros(dim))
        self.time = TimeFeatures(time_dim, hidden)
        self.input_proj = nn.Linear(2 * dim + hidden, hidden)
        self.blocks = nn.ModuleList([ResidualBlock(hidden, hidden) for _ in range(layers)])
        self.final_norm = AdaptiveRMSNorm(hidden, hidden)
        self.output_proj = nn.Linear(hidden, dim)


    def forward(self, z, lam, prefix=None, mask=None):
        """
        GIVEN:
          z (torch.Tensor) -- (B, d) noisy latents
          lam (torch.Tensor) -- (B,) log-SNR
          prefix (torch.Tensor) -- (B, d) prefix embeddings, or None for unconditional
          mask (torch.Tensor) -- optional (B,) bool, True where the prefix is dropped

        RETURN:
          ____ (torch.Tensor) -- (B, d) predicted v
        """
        null = self.null_embedding.expand(z.shape[0], self.dim)
        if prefix is None:
            prefix = null
        elif mask is not None:
            prefix = torch.where(mask[:, None], null, prefix)

        u = (lam - self.lambda_min) / (self.lambda_max - self.lambda_min)
        cond = self.time(u)
        h = self.input_proj(torch.cat([z, prefix, cond], dim=-1))
        for block in self.blocks:
            h = block(h, cond)
        return self.output_proj(self.final_norm(h, cond))


    def meta(self):
        return {
            "kind": CHECKPOINT_KIND, "dim": self.dim, "hidden": self.hidden,
            "layers": self.num_layers, "time_dim": self.time_dim,
            "lambda_min": self.lambda_min, "lambda_max": self.lambda_max,
        }


class DenoiserTrainer(object):
    """
    Everything one denoiser training step touches: the model, its AdamW optimizer and schedule,
    the adaptive log-SNR sampler, and the numpy and torch random streams.
    """
    def __init__(self, model, config, steps=None):
        self.model = model
        self.wfn = WeightingFn(config["loss.weighting"], float(config["loss.scale"]))
        self.mask_prob = float(config["train.mask_prob"])
        self.adaptive = newAdaptiveState(
            config["schedule.lambda_min"], config["schedule.lambda_max"],
            config["adaptive.bins"], config["adaptive.decay"], config["adaptive.floor"])
        total = config["train.steps"] if steps is None else steps
        self.optimizer, self.scheduler = buildOptimizer(
            model.parameters(), config["train.lr"], config["train.weight_decay"],
            config["train.beta2"], config["train.warmup"], total)
        self.rng = numpyGenerator(config["train.seed"])
        self.generator = torchGenerator(deriveSeed(config["train.seed"], 1))


#### FUNCTIONS #####################################################################################
def buildDenoiser(config, dim):
    """
    Build a fresh Denoiser from the model.* and schedule.* keys.
    """
    return Denoiser(dim=dim, hidden=config["model.hidden"], layers=config["model.layers"],
                    time_dim=config["model.time_dim"],
                    lambda_min=config["schedule.lambda_min"],
                    lambda_max=config["schedule.lambda_max"])


def predictV(model, z, prefix, mask=None):
    """
    Predict v for a latent. Accepts a single (d,) vector or a (B, d) batch; prefix may be None
    (unconditional). The output has z's dtype, so gradients flow back to z.

    GIVEN:
      model (Denoiser) -- the network
      z (LatentState) -- noisy latent
      prefix (torch.Tensor) -- (d,) or (B, d) prefix embedding, or None
      mask (torch.Tensor) -- optional (B,) bool prefix-dropout mask

    RETURN:
      ____ (Prediction) -- kind 'v'
    """
    checkDim("z", z.z, model.dim)
    single = z.z.dim() == 1
    dtype = next(model.parameters()).dtype

    zb = z.z.reshape(-1, model.dim)
    lam = torch.as_tensor(np.asarray(z.lam, dtype=np.float64), dtype=dtype)
    lam = lam.expand(zb.shape[0]) if lam.dim() == 0 else lam
    if prefix is not None:
        checkDim("prefix", prefix, model.dim)
        prefix = torch.as_tensor(prefix).to(dtype).reshape(-1, model.dim).expand(zb.shape[0], -1)

    out = model(zb.to(dtype), lam, prefix, mask).to(z.z.dtype)
    return Prediction(kind="v", value=out[0] if single else out)


def denoiserLoss(model, x, x_pref, lam, eps, mask, importance, wfn):
    """
    Importance-weighted mean DSM loss of one batch with every random draw fixed.

    RETURN:
      loss (torch.Tensor) -- scalar mean loss
      per_row (torch.Tensor) -- (B,) unweighted-by-importance losses
    """
    latent = forwardDiffuseLambda(x, lam, eps)
    v_hat = predictV(model, latent, x_pref, mask)
    per_row = dsmVLoss(v_hat, x, eps, latent, wfn)
    iw = torch.as_tensor(np.asarray(importance, dtype=np.float64), dtype=per_row.dtype)
    return torch.mean(iw * per_row), per_row


def trainStep(trainer, x_cont, x_pref):
    """
    One CFG-joint training step: sample lambda from the adaptive sampler, diffuse, drop each
    prefix independently with probability mask_prob, take one AdamW step on the
    importance-weighted DSM loss, and fold the per-row losses back into the sampler.

    GIVEN:
      trainer (DenoiserTrainer) -- model, optimizer, sampler and random streams
      x_cont (torch.Tensor) -- (B, d) continuation embeddings
      x_pref (torch.Tensor) -- (B, d) prefix embeddings

    RETURN:
      ____ (float) -- the batch loss
    """
    if x_cont.shape[0] == 0:
        raise ValueError("trainStep needs a nonempty batch.")
    dtype = next(trainer.model.parameters()).dtype
    x_cont = x_cont.to(dtype)
    x_pref = x_pref.to(dtype)
    batch = x_cont.shape[0]

    lam, importance = adaptiveSample(trainer.adaptive, trainer.rng, size=batch)
    eps = torch.randn(x_cont.shape, generator=trainer.generator, dtype=dtype)
    mask = torch.as_tensor(trainer.rng.random(batch) < trainer.mask_prob)

    trainer.model.train()
    loss, per_row = denoiserLoss(trainer.model, x_cont, x_pref, lam, eps, mask, importance,
                                 trainer.wfn)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("Denoiser loss is {} (lambda range [{:.3g}, {:.3g}]).".format(
            float(loss), float(np.min(lam)), float(np.max(lam))))

    loss.backward()
    optimizerStep(trainer.optimizer, trainer.scheduler, trainer.model.parameters())
    adaptiveUpdate(trainer.adaptive, lam, per_row.detach().double().numpy())

    return float(loss)


def heldoutLosses(model, x, x_pref, wfn, seed=0):
    """
    Conditional and unconditional held-out DSM loss on a fixed lambda grid with fixed noise, so
    successive evaluations are comparable.

    RETURN:
      cond (float) -- loss with the prefix
      uncond (float) -- loss with the null embedding
    """
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)
    x_pref = x_pref.to(dtype)
    lam = np.linspace(model.lambda_min, model.lambda_max, HELDOUT_LAMBDAS)
    lam = np.resize(lam, x.shape[0])
    eps = torch.randn(x.shape, generator=torchGenerator(seed), dtype=dtype)
    ones = np.ones(x.shape[0])
    everyone = torch.ones(x.shape[0], dtype=torch.bool)

    model.eval()
    with torch.no_grad():
        cond, _ = denoiserLoss(model, x, x_pref, lam, eps, None, ones, wfn)
        uncond, _ = denoiserLoss(model, x, x_pref, lam, eps, everyone, ones, wfn)
    return float(cond), float(uncond)


def trainDenoiser(x_cont, x_pref, config, verbose=True):
    """
    Train a denoiser on (continuation, prefix) embedding pairs. A held-out slice is scored
    with and without the prefix at regular intervals.

    GIVEN:
      x_cont (torch.Tensor) -- (N, d) continuation embeddings
      x_pref (torch.Tensor) -- (N, d) prefix embeddings
      config (RunConfig) -- resolved configuration
      verbose (bool) -- print progress

    RETURN:
      model (Denoiser) -- the trained network
      history (list) -- (step, heldout_cond, heldout_uncond) tuples
    """
    seed = config["train.seed"]
    torch.manual_seed(seed)
    model = buildDenoiser(config, x_cont.shape[1])
    trainer = DenoiserTrainer(model, config)

    order = numpyGenerator(deriveSeed(seed, 2)).permutation(x_cont.shape[0])
    num_heldout = max(1, int(math.ceil(HELDOUT_FRACTION * len(order))))
    heldout, train = order[:num_heldout], order[num_heldout:]
    if len(train) == 0:
        train = heldout

    x_cont = x_cont.float()
    x_pref = x_pref.float()
    steps = config["train.steps"]
    batch_size = config["train.batch_size"]
    eval_every = max(1, steps // NUM_EVALS)
    history = list()

    if verbose:
        print("\tTraining denoiser on {} pairs ({} held out)...".format(len(train), num_heldout))
    progress = tqdm(range(steps), disable=not verbose)
    for step in progress:
        idx = train[trainer.rng.integers(0, len(train), size=batch_size)]
        loss = trainStep(trainer, x_cont[idx], x_pref[idx])
        progress.set_postfix(loss="{:.4f}".format(loss))

        if (step + 1) % eval_every == 0 or step + 1 == steps:
            cond, uncond = heldoutLosses(model, x_cont[heldout], x_pref[heldout], trainer.wfn,
                                         seed=deriveSeed(seed, 3))
            history.append((step + 1, cond, uncond))
            if verbose:
                tqdm.write("\tstep {}: heldout cond={:.5f} uncond={:.5f}".format(
                    step + 1, cond, uncond))

    model.eval()
    return model, history


def saveDenoiser(model, filepath):
    """
    Save a denoiser with its architecture in the manifest.
    """
    saveModule(filepath, model, model.meta())


def loadDenoiser(filepath, config=None):
    """
    Load a denoiser. Without a config the architecture comes from the manifest; with one it comes
    from model.* keys, and any tensor whose stored shape disagrees is reported by name.
    """
    _, meta = loadCheckpoint(filepath)
    if config is None:
        model = Denoiser(dim=meta["dim"], hidden=meta["hidden"], layers=meta["layers"],
                         time_dim=meta["time_dim"], lambda_min=meta["lambda_min"],
                         lambda_max=meta["lambda_max"])
    else:
        model = buildDenoiser(config, meta.get("dim", config["embed.dim"]))
    loadModuleState(filepath, model)
    model.eval()
    return model


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
