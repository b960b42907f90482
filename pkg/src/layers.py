#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import math
import sys


#### PACKAGE IMPORTS ###############################################################################
import torch
import torch.nn as nn
import torch.nn.functional as F


#### GLOBALS #######################################################################################
SINUSOID_SCALE = 1000.0
SINUSOID_MAX_PERIOD = 10000.0


#### CLASSES #######################################################################################
class RMSNorm(nn.Module):
    """
    Root-mean-square normalization over the last axis with a learnable gain.
    """
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))


    def forward(self, x):
        return x * torch.rsqrt(torch.mean(x ** 2, dim=-1, keepdim=True) + self.eps) * self.weight


class AdaptiveRMSNorm(nn.Module):
    """
    RMSNorm whose gain and bias are predicted from a conditioning vector:
        out = norm(x) * (1 + scale(c)) + shift(c)
    The projection starts at zero, so a fresh layer is a plain RMSNorm.
    """
    def __init__(self, dim, cond_dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.proj = nn.Linear(cond_dim, 2 * dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)


    def forward(self, x, cond):
        normed = x * torch.rsqrt(torch.mean(x ** 2, dim=-1, keepdim=True) + self.eps)
        scale, shift = self.proj(cond).chunk(2, dim=-1)
        # Sequence inputs (B, T, h) take one conditioning row per batch element
        if x.dim() == 3:
            scale, shift = scale[:, None, :], shift[:, None, :]
        return normed * (1.0 + scale) + shift


class SwiGLU(nn.Module):
    """
    Gated feed-forward layer: out(silu(gate(x)) * up(x)).
    """
    def __init__(self, dim, hidden):
        super().__init__()
        self.gate = nn.Linear(dim, hidden)
        self.up = nn.Linear(dim, hidden)
        self.out = nn.Linear(hidden, dim)


    def forward(self, x):
        return self.out(F.silu(self.gate(x)) * self.up(x))


class TimeFeatures(nn.Module):
    """
    Sinusoidal embedding of a noise level in [0, 1] followed by a one-hidden-layer map.
    """
    def __init__(self, sinusoid_dim, out_dim):
        super().__init__()
        if sinusoid_dim % 2 != 0:
            raise ValueError("sinusoid_dim must be even, got {}.".format(sinusoid_dim))
        self.sinusoid_dim = sinusoid_dim
        self.mlp = nn.Sequential(
            nn.Linear(sinusoid_dim, out_dim),
            nn.SiLU(),
            nn.Linear(out_dim, out_dim),
        )


    def forward(self, u):
        return self.mlp(sinusoidalFeatures(u, self.sinusoid_dim))


class SelfAttention(nn.Module):
    """
    Multi-head self-attention, causal or bidirectional.
    """
    def __init__(self, width, heads, causal=True):
        super().__init__()
        if width % heads != 0:
            raise ValueError("width={} must be divisible by heads={}.".format(width, heads))
        self.heads = heads
        self.head_dim = width // heads
        self.causal = causal
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)


    def forward(self, x):
        B, T, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=-1)
        q = q.view(B, T, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(B, T, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(B, T, self.heads, self.head_dim).transpose(1, 2)

        out = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        out = out.transpose(1, 2).contiguous().view(B, T, C)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """
    Pre-norm transformer block. With cond_dim set, both norms are AdaptiveRMSNorm driven by a
    conditioning vector; otherwise plain RMSNorm.
    """
    def __init__(self, width, heads, causal=True, cond_dim=None, mlp_ratio=4):
        super().__init__()
        self.conditioned = cond_dim is not None
        if self.conditioned:
            self.norm1 = AdaptiveRMSNorm(width, cond_dim)
            self.norm2 = AdaptiveRMSNorm(width, cond_dim)
        else:
            self.norm1 = RMSNorm(width)
            self.norm2 = RMSNorm(width)
        self.attn = SelfAttention(width, heads, causal=causal)
        self.mlp = SwiGLU(width, mlp_ratio * width)


    def _norm(self, norm, x, cond):
        return norm(x, cond) if self.conditioned else norm(x)


    def forward(self, x, cond=None):
        x = x + self.attn(self._norm(self.norm1, x, cond))
        x = x + self.mlp(self._norm(self.norm2, x, cond))
        return x


#### FUNCTIONS #####################################################################################
def sinusoidalFeatures(u, dim):
    """
    Transformer-style sinusoidal features of a scalar per row.

    GIVEN:
      u (torch.Tensor) -- (B,) values, expected in [0, 1]
      dim (int) -- even feature width

    RETURN:
      ____ (torch.Tensor) -- (B, dim) features, sines then cosines
    """
    half = dim // 2
    freqs = torch.exp(-math.log(SINUSOID_MAX_PERIOD)
                      * torch.arange(half, dtype=u.dtype, device=u.device) / half)
    args = SINUSOID_SCALE * u[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def countParameters(module):
    """
    Number of trainable scalars in a module.
    """
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
