"""Primal-dual entropy constraint.

The losses carry a -kappa * H(pi) term; kappa itself is adapted in log
space toward the target entropy rho, so it stays positive: whenever the
policy's entropy falls below rho the multiplier grows and pushes it back
up. Target rho defaults to -action_dim in the training configs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass
class EntropyDual:
    rho: float
    kappa_init: float = 0.1
    lr: float = 3e-4
    log_kappa: float = field(init=False)

    def __post_init__(self):
        if self.kappa_init <= 0.0:
            raise ValueError("kappa_init must be positive")
        self.log_kappa = math.log(self.kappa_init)

    @property
    def kappa(self) -> float:
        return math.exp(self.log_kappa)

    def update(self, mean_entropy: float) -> float:
        """One dual ascent step; returns the new kappa."""
        self.log_kappa += self.lr * (self.rho - mean_entropy)
        return self.kappa


def update_dual(dual: EntropyDual, mean_entropy: float) -> float:
    return dual.update(mean_entropy)
