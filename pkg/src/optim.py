#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import math
import sys


#### PACKAGE IMPORTS ###############################################################################
import torch


#### GLOBALS #######################################################################################
GRAD_CLIP = 1.0
BETA1 = 0.9


#### FUNCTIONS #####################################################################################
def warmupCosine(step, warmup, total):
    """
    Learning-rate multiplier: linear warmup from 0 over 'warmup' steps, then cosine decay to 0
    at 'total'.

    GIVEN:
      step (int) -- zero-based optimizer step
      warmup (int) -- warmup length
      total (int) -- total number of steps

    RETURN:
      ____ (float) -- multiplier in [0, 1]
    """
    if warmup > 0 and step < warmup:
        return float(step + 1) / float(warmup)
    if total <= warmup:
        return 1.0
    progress = min(float(step - warmup) / float(total - warmup), 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def buildOptimizer(parameters, lr, weight_decay, beta2, warmup, total):
    """
    AdamW with decoupled weight decay and a warmup + cosine LambdaLR schedule.

    RETURN:
      optimizer (torch.optim.AdamW) -- the optimizer
      scheduler (torch.optim.lr_scheduler.LambdaLR) -- its learning-rate schedule
    """
    optimizer = torch.optim.AdamW(parameters, lr=lr, betas=(BETA1, beta2),
                                  weight_decay=weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: warmupCosine(step, warmup, total))
    return optimizer, scheduler


def optimizerStep(optimizer, scheduler, parameters, clip=GRAD_CLIP):
    """
    Clip the global gradient norm, step the optimizer and the schedule, and clear gradients.
    Returns the pre-clip gradient norm.
    """
    norm = torch.nn.utils.clip_grad_norm_(parameters, clip)
    optimizer.step()
    scheduler.step()
    optimizer.zero_grad(set_to_none=True)
    return float(norm)


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
