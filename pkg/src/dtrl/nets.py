"""Networks: the decision-transformer policy, value MLP, and twin critics.

The policy is a causal transformer over interleaved (rtg, state, action)
tokens with NO positional embeddings: token identity comes entirely from
the three modality-specific linear embeddings (each with its own bias).
Pre-LN blocks, SiLU feedforward, causal mask. The action distribution for
step i is read at the state token of step i; the current step's action
token is never part of its own context.

Everything runs in float64 on CPU. Output heads are zero-initialized, so
a fresh policy is exactly N(0, I) for every context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .gaussian import GaussianDist, gaussian_log_prob
from .trajectory import Context, SubTrajRecord


@dataclass
class DTConfig:
    obs_dim: int
    action_dim: int
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 64
    context_len: int = 20
    dropout: float = 0.1
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    def __post_init__(self):
        if self.obs_dim < 1 or self.action_dim < 1:
            raise ValueError("obs_dim and action_dim must be positive")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.log_std_min >= self.log_std_max:
            raise ValueError("log_std_min must be below log_std_max")


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.resid_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, S, D = x.shape
        H = self.heads
        q, k, v = self.qkv(x).split(D, dim=2)
        q = q.view(B, S, H, D // H).transpose(1, 2)
        k = k.view(B, S, H, D // H).transpose(1, 2)
        v = v.view(B, S, H, D // H).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // H)
        mask = torch.triu(torch.ones(S, S, dtype=torch.bool), diagonal=1)
        att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        att = self.attn_drop(att)
        y = (att @ v).transpose(1, 2).reshape(B, S, D)
        return self.resid_drop(self.proj(y))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.SiLU(),
            nn.Linear(4 * dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class DTPolicy(nn.Module):
    def __init__(self, cfg: DTConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        self.embed_rtg = nn.Linear(1, D)
        self.embed_state = nn.Linear(cfg.obs_dim, D)
        self.embed_action = nn.Linear(cfg.action_dim, D)
        self.blocks = nn.ModuleList(
            [Block(D, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers)]
        )
        self.ln_f = nn.LayerNorm(D)
        self.mean_head = nn.Linear(D, cfg.action_dim)
        self.log_std_head = nn.Linear(D, cfg.action_dim)
        nn.init.zeros_(self.mean_head.weight)
        nn.init.zeros_(self.mean_head.bias)
        nn.init.zeros_(self.log_std_head.weight)
        nn.init.zeros_(self.log_std_head.bias)
        self.double()

    def forward(
        self, rtgs: torch.Tensor, states: torch.Tensor, actions: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Gaussian parameters at every state-token position.

        rtgs (B, k+1), states (B, k+1, obs), actions (B, k, act); the
        final step's action is absent by construction. Returns mean and
        var, each (B, k+1, action_dim).
        """
        B, kp1 = rtgs.shape
        tok_r = self.embed_rtg(rtgs.unsqueeze(-1))
        tok_s = self.embed_state(states)
        tok_a = self.embed_action(actions)
        pad = torch.zeros(B, 1, self.cfg.embed_dim, dtype=tok_a.dtype)
        tok_a = torch.cat([tok_a, pad], dim=1)
        x = torch.stack([tok_r, tok_s, tok_a], dim=2).reshape(B, 3 * kp1, -1)
        x = x[:, : 3 * kp1 - 1]
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        feats = x[:, 1::3]
        mean = self.mean_head(feats)
        log_std = torch.clamp(
            self.log_std_head(feats), self.cfg.log_std_min, self.cfg.log_std_max
        )
        return mean, torch.exp(2.0 * log_std)

    @torch.no_grad()
    def dist(self, ctx: Context) -> GaussianDist:
        """Frozen action distribution for the final step of one context."""
        rtgs = torch.from_numpy(np.ascontiguousarray(ctx.rtgs))[None]
        states = torch.from_numpy(np.ascontiguousarray(ctx.states))[None]
        actions = torch.from_numpy(np.ascontiguousarray(ctx.actions))[None]
        mean, var = self.forward(rtgs, states, actions)
        return GaussianDist(mean[0, -1].clone(), var[0, -1].clone())

    @torch.no_grad()
    def action_dists(self, contexts: list[Context]) -> tuple[torch.Tensor, torch.Tensor]:
        """Frozen (mean, var) for the final step of each context, (N, action_dim)."""
        mean, var = contexts_forward(self, contexts)
        return mean.clone(), var.clone()


def contexts_forward(
    policy: DTPolicy, contexts: list[Context]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Final-step Gaussian parameters for a ragged batch of contexts.

    Contexts are bucketed by step count (stacks must be rectangular) and
    reassembled in input order, so results do not depend on the grouping.
    Returns (mean, var), each (N, action_dim), differentiable.
    """
    buckets: dict[int, list[int]] = {}
    for i, c in enumerate(contexts):
        buckets.setdefault(c.steps, []).append(i)
    means, vars_, order = [], [], []
    for steps in sorted(buckets):
        idx = buckets[steps]
        rtgs = torch.from_numpy(np.stack([contexts[i].rtgs for i in idx]))
        states = torch.from_numpy(np.stack([contexts[i].states for i in idx]))
        actions = torch.from_numpy(np.stack([contexts[i].actions for i in idx]))
        m, v = policy(rtgs, states, actions)
        means.append(m[:, -1])
        vars_.append(v[:, -1])
        order.extend(idx)
    mean = torch.cat(means, dim=0)
    var = torch.cat(vars_, dim=0)
    inv = torch.empty(len(contexts), dtype=torch.long)
    inv[torch.as_tensor(order)] = torch.arange(len(contexts))
    return mean[inv], var[inv]


def record_contexts(rec: SubTrajRecord, m: int) -> list[Context]:
    """Per-step contexts of a stored segment, windowed to m steps.

    Step j sees the last min(m, p+j+1) steps of parent context plus the
    segment so far, exactly what the behavior policy conditioned on when
    the action was sampled.
    """
    comb_rtgs = np.concatenate([rec.parent_rtgs, rec.rtgs])
    comb_states = np.concatenate([rec.parent_states, rec.states])
    comb_actions = np.concatenate([rec.parent_actions, rec.actions])
    p = len(rec.parent_rtgs)
    out = []
    for j in range(len(rec)):
        q = p + j
        lo = max(0, q - m + 1)
        out.append(
            Context(comb_rtgs[lo : q + 1], comb_states[lo : q + 1], comb_actions[lo:q])
        )
    return out


def segment_forward(
    policy: DTPolicy, records: list[SubTrajRecord], m: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Gaussian parameters for every step of every record.

    Returns (mean, var, actions, mask): mean/var/actions are
    (N, L_max, action_dim) with zero padding past each record's length
    (var is padded with ones); mask is (N, L_max) bool.
    """
    lens = [len(r) for r in records]
    l_max = max(lens)
    flat: list[Context] = []
    for r in records:
        flat.extend(record_contexts(r, m))
    mean_f, var_f = contexts_forward(policy, flat)
    d = mean_f.shape[-1]
    N = len(records)
    mean = torch.zeros(N, l_max, d, dtype=torch.float64)
    var = torch.ones(N, l_max, d, dtype=torch.float64)
    actions = torch.zeros(N, l_max, d, dtype=torch.float64)
    mask = torch.zeros(N, l_max, dtype=torch.bool)
    off = 0
    for i, (r, L) in enumerate(zip(records, lens)):
        mean[i, :L] = mean_f[off : off + L]
        var[i, :L] = var_f[off : off + L]
        actions[i, :L] = torch.from_numpy(r.actions)
        mask[i, :L] = True
        off += L
    return mean, var, actions, mask


def seq_log_prob(policy: DTPolicy, rec: SubTrajRecord, m: int) -> torch.Tensor:
    """Joint log-probability of a record's actions under the policy."""
    mean, var = contexts_forward(policy, record_contexts(rec, m))
    actions = torch.from_numpy(rec.actions)
    return gaussian_log_prob(mean, var, actions).sum()


class ValueMLP(nn.Module):
    """State-value head: two linear layers with SiLU, optional LayerNorm."""

    def __init__(self, obs_dim: int, hidden: int = 64, layer_norm: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(obs_dim, hidden)
        self.ln = nn.LayerNorm(hidden) if layer_norm else nn.Identity()
        self.act = nn.SiLU()
        self.fc2 = nn.Linear(hidden, 1)
        self.double()

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.ln(self.fc1(obs)))).squeeze(-1)


class QMLP(nn.Module):
    def __init__(self, obs_dim: int, action_dim: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(obs_dim + action_dim, hidden)
        self.act = nn.SiLU()
        self.fc2 = nn.Linear(hidden, 1)
        self.double()

    def forward(self, obs: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        x = torch.cat([obs, action], dim=-1)
        return self.fc2(self.act(self.fc1(x))).squeeze(-1)


class TwinQ(nn.Module):
    """Two independently initialized critics; min over them fights overestimation."""

    def __init__(self, obs_dim: int, action_dim: int, hidden: int = 64):
        super().__init__()
        self.q1 = QMLP(obs_dim, action_dim, hidden)
        self.q2 = QMLP(obs_dim, action_dim, hidden)

    def forward(
        self, obs: torch.Tensor, action: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.q1(obs, action), self.q2(obs, action)


def flatten_params(module: nn.Module) -> torch.Tensor:
    """All parameters as one float64 vector, in registration order."""
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def unflatten_params(module: nn.Module, vec: torch.Tensor) -> None:
    """Write a flat vector back into the parameters. Inverse of flatten_params."""
    total = sum(p.numel() for p in module.parameters())
    if vec.numel() != total:
        raise ValueError(f"expected {total} values, got {vec.numel()}")
    off = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(vec[off : off + n].view_as(p))
            off += n
