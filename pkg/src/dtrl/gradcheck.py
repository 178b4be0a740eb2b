"""Finite-difference gradient verification.

An independent route to the gradient: central differences on the loss as
a black box, compared against autograd. Used by the test suite on every
training loss with small models and clip-inactive fixtures.
"""

from __future__ import annotations

from typing import Callable, Iterable

import torch
import torch.nn as nn


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    modules: nn.Module | Iterable[nn.Module],
    eps: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn must be a deterministic closure over the modules' parameters
    (eval mode, no sampling). Relative error per coordinate is
    |fd - analytic| / max(1, |analytic|).
    """
    if isinstance(modules, nn.Module):
        modules = [modules]
    modules = list(modules)
    params = [p for mod in modules for p in mod.parameters()]

    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = torch.cat(
        [
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
            for p in params
        ]
    )

    worst = 0.0
    i = 0
    with torch.no_grad():
        for p in params:
            flat = p.data.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                up = loss_fn().item()
                flat[j] = orig - eps
                down = loss_fn().item()
                flat[j] = orig
                fd = (up - down) / (2.0 * eps)
                an = analytic[i].item()
                err = abs(fd - an) / max(1.0, abs(an))
                worst = max(worst, err)
                i += 1
    for p in params:
        p.grad = None
    return worst
