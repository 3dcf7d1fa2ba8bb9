"""Centralized halting: a context transformer emitting one halting probability per step,
the truncated halting distribution it induces, and the regularizers on that distribution."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import torch
from torch import nn

from .conv_ut import FFN, LN_EPS


def row_alibi_bias(height: int, width: int) -> torch.Tensor:
    """Score -(row index) for every cell of the row-major flattened grid."""
    return -torch.arange(height, dtype=torch.float64).repeat_interleave(width)


def alibi_slopes(n_heads: int) -> torch.Tensor:
    return torch.tensor([2.0 ** (-8.0 * i / n_heads) for i in range(1, n_heads + 1)])


class ContextTransformer(nn.Module):
    """Reads the flattened grid into S_C context vectors and emits lambda_n."""

    def __init__(
        self,
        d_emb: int,
        context_len: int = 3,
        heads: int = 8,
        hidden: int = 64,
        halt_hidden: int = 128,
        dropout: float = 0.0,
    ):
        super().__init__()
        if d_emb % heads:
            raise ValueError(f"context heads ({heads}) must divide d_emb ({d_emb})")
        self.d_emb, self.context_len, self.heads = d_emb, context_len, heads
        self.c0 = nn.Parameter(torch.randn(context_len, d_emb) / math.sqrt(d_emb))
        self.q_proj = nn.Linear(d_emb, d_emb)
        self.k_proj = nn.Linear(d_emb, d_emb)
        self.v_proj = nn.Linear(d_emb, d_emb)
        self.o_proj = nn.Linear(d_emb, d_emb)
        self.norm1 = nn.LayerNorm(d_emb, eps=LN_EPS)
        self.ffn = FFN([d_emb, hidden, d_emb], dropout)
        self.norm2 = nn.LayerNorm(d_emb, eps=LN_EPS)
        self.halt = FFN([context_len * d_emb, halt_hidden, 1], dropout, dropout_last=False)
        self.dropout = nn.Dropout(dropout)
        self.register_buffer("slopes", alibi_slopes(heads), persistent=False)

    def initial_state(self, batch: int, like: torch.Tensor | None = None) -> torch.Tensor:
        c0 = self.c0 if like is None else self.c0.to(like.dtype)
        return c0.unsqueeze(0).expand(batch, -1, -1)

    def attention(self, ctx: torch.Tensor, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Multi-head cross-attention of context on the grid with row-wise ALiBi.

        Returns the projected output (B, S_C, d) and weights (B, heads, S_C, H*W).
        """
        b, h, w, d = grid.shape
        flat = grid.reshape(b, h * w, d)
        dk = d // self.heads
        q = self.q_proj(ctx).view(b, -1, self.heads, dk).transpose(1, 2)
        k = self.k_proj(flat).view(b, -1, self.heads, dk).transpose(1, 2)
        v = self.v_proj(flat).view(b, -1, self.heads, dk).transpose(1, 2)
        bias = self.slopes.to(grid.dtype).view(-1, 1, 1) * row_alibi_bias(h, w).to(grid.dtype)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dk) + bias
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, -1, d)
        return self.dropout(self.o_proj(out)), weights

    def forward(self, ctx: torch.Tensor, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        c = self.norm1(ctx + self.attention(ctx, grid)[0])
        c = self.norm2(c + self.ffn(c))
        lam = torch.sigmoid(self.halt(c.flatten(1))).squeeze(-1)
        return c, lam


def context_step(ctx: torch.Tensor, grid: torch.Tensor, params: ContextTransformer) -> tuple[torch.Tensor, torch.Tensor]:
    return params(ctx, grid)


@dataclass
class HaltingDistribution:
    lambdas: list[float]
    probs: list[float]
    horizon: int
    eps: float

    def expected_steps(self) -> float:
        return sum(n * p for n, p in enumerate(self.probs))


def halting_distribution(lambdas: Iterable[float], eps: float = 0.05, max_steps: int = 40) -> HaltingDistribution:
    """Truncated generalized geometric distribution from a stream of halting probabilities.

    Consumes the stream only up to the horizon N: the first step whose
    cumulative mass reaches 1 - eps, or step max_steps - 1. p_N takes the
    remainder so the probabilities sum to one.
    """
    lams: list[float] = []
    probs: list[float] = []
    survive = 1.0
    total = 0.0
    for n, lam in enumerate(lambdas):
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"halting probability {lam} outside [0, 1]")
        lams.append(float(lam))
        p = lam * survive
        survive *= 1.0 - lam
        if 1.0 - survive >= 1.0 - eps or n + 1 >= max_steps:
            probs.append(1.0 - total)
            return HaltingDistribution(lams, probs, n, eps)
        probs.append(p)
        total += p
    if not lams:
        raise ValueError("empty halting stream")
    # stream ran out before the horizon: the last step absorbs the rest
    probs[-1] = 1.0 - (total - probs[-1])
    return HaltingDistribution(lams, probs, len(lams) - 1, eps)


def batched_halting_distribution(lambdas: torch.Tensor, horizon: torch.Tensor) -> torch.Tensor:
    """Differentiable p_n for (B, T) lambdas with per-sample horizons; zero past each horizon."""
    b, t = lambdas.shape
    survive = torch.cumprod(torch.cat([lambdas.new_ones(b, 1), 1 - lambdas[:, :-1]], dim=1), dim=1)
    p = lambdas * survive
    steps = torch.arange(t).unsqueeze(0)
    before = steps < horizon.unsqueeze(1)
    p = torch.where(before, p, torch.zeros_like(p))
    remainder = 1 - p.sum(dim=1, keepdim=True)
    return torch.where(steps == horizon.unsqueeze(1), remainder.expand(-1, t), p)


def sample_halt(
    lam: torch.Tensor,
    generator: torch.Generator | None = None,
    deterministic: bool = False,
) -> torch.Tensor:
    """Bernoulli(lambda) halting decisions; `deterministic` halts iff lambda >= 0.5."""
    lam = torch.as_tensor(lam)
    if deterministic:
        return lam >= 0.5
    u = torch.rand(lam.shape, generator=generator, dtype=torch.float64)
    return u < lam.detach().double()


def entropy(p: torch.Tensor) -> torch.Tensor:
    return -torch.special.xlogy(p, p).sum(-1)


def expected_log_steps(p: torch.Tensor) -> torch.Tensor:
    n = torch.arange(p.shape[-1], dtype=p.dtype)
    return (p * torch.log1p(n)).sum(-1)


def truncated_geometric(lambda_p: float, horizon: torch.Tensor, length: int, dtype=torch.float64) -> torch.Tensor:
    """lambda_p (1 - lambda_p)^n for n < N, remainder (1 - lambda_p)^N at N, zero beyond."""
    horizon = torch.as_tensor(horizon)
    n = torch.arange(length, dtype=dtype)
    g = lambda_p * (1 - lambda_p) ** n
    tail = (1 - lambda_p) ** n
    steps = n.expand(*horizon.shape, length)
    hz = horizon.unsqueeze(-1).to(dtype)
    return torch.where(steps < hz, g, torch.where(steps == hz, tail, torch.zeros_like(g)))


def kl_geometric_regularizer(p: torch.Tensor, lambda_p: float, horizon: torch.Tensor | None = None) -> torch.Tensor:
    """KL(p || geometric(lambda_p) truncated at the horizon), with 0 log 0 = 0."""
    if not 0.0 < lambda_p < 1.0:
        raise ValueError("lambda_p must lie in (0, 1)")
    length = p.shape[-1]
    if horizon is None:
        horizon = torch.full(p.shape[:-1], length - 1, dtype=torch.long)
    g = truncated_geometric(lambda_p, horizon, length, p.dtype)
    log_g = torch.log(torch.where(g > 0, g, torch.ones_like(g)))
    return (torch.special.xlogy(p, p) - p * log_g).sum(-1)


def kl_closed_form(p: torch.Tensor, lambda_p: float) -> torch.Tensor:
    """KL to the untruncated geometric via -H(p) - log(lambda_p) - log(1 - lambda_p) E[N]."""
    n = torch.arange(p.shape[-1], dtype=p.dtype)
    mean = (p * n).sum(-1)
    return -entropy(p) - math.log(lambda_p) - math.log(1 - lambda_p) * mean


def er_regularizer(p: torch.Tensor, accuracy: torch.Tensor | float) -> torch.Tensor:
    """Explore-Reinforce: -(1 - a) H(p) + a E[log(1 + N)], with `accuracy` held constant."""
    a = torch.as_tensor(accuracy, dtype=p.dtype).detach()
    return -(1 - a) * entropy(p) + a * expected_log_steps(p)
