"""Diagonal Gaussian policy head math.

All functions take torch tensors with the action dimension last and
reduce over it. The same code path serves rollout-time sampling and the
training losses, so behavior log-probs recorded online agree with a later
recomputation under identical parameters to machine precision.

Actions are unsquashed: the environment clips them, and log-probs are
always evaluated on the raw Gaussian sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

LOG_TWO_PI = math.log(2.0 * math.pi)


def gaussian_log_prob(mean: torch.Tensor, var: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
    """log N(action; mean, diag(var)), summed over the last dimension."""
    t = -0.5 * (LOG_TWO_PI + torch.log(var)) - (action - mean) ** 2 / (2.0 * var)
    return t.sum(dim=-1)

def gaussian_entropy(var: torch.Tensor) -> torch.Tensor:
    """d/2 * (1 + log 2 pi) + 1/2 * sum_i log var_i."""
    d = var.shape[-1]
    return 0.5 * d * (1.0 + LOG_TWO_PI) + 0.5 * torch.log(var).sum(dim=-1)

def gaussian_kl(
    mean_p: torch.Tensor, var_p: torch.Tensor, mean_q: torch.Tensor, var_q: torch.Tensor
) -> torch.Tensor:
    """KL(p || q) for diagonal Gaussians, summed over the last dimension."""
    t = var_p / var_q + (mean_q - mean_p) ** 2 / var_q - 1.0 + torch.log(var_q / var_p)
    return 0.5 * t.sum(dim=-1)


@dataclass
class GaussianDist:
    """A frozen policy output: mean and variance, detached float64 tensors."""

    mean: torch.Tensor
    var: torch.Tensor

    def sample(self, g: np.random.Generator) -> torch.Tensor:
        z = torch.from_numpy(g.standard_normal(self.mean.shape[-1]))
        return self.mean + torch.sqrt(self.var) * z

    def log_prob(self, action: torch.Tensor) -> torch.Tensor:
        return gaussian_log_prob(self.mean, self.var, action)

    def entropy(self) -> torch.Tensor:
        return gaussian_entropy(self.var)

    def mode(self) -> torch.Tensor:
        return self.mean
