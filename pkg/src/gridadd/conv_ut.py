"""Recurrent convolutional transformer core with grouped local attention."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import torch
import torch.nn.functional as F
from torch import nn

if TYPE_CHECKING:
    from .halting import ContextTransformer

LN_EPS = 1e-5


class FFN(nn.Module):
    """L-layer feedforward net: W_L silu(FFN_{L-1}(x)) + b_L, with W_1 x + b_1 at the bottom.

    Dropout follows every linear layer except, when `dropout_last` is False, the
    final one (used for heads that emit logits).
    """

    def __init__(self, dims: Sequence[int], dropout: float = 0.0, dropout_last: bool = True):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("an FFN needs at least input and output sizes")
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.dropout = nn.Dropout(dropout)
        self.dropout_last = dropout_last

    @property
    def depth(self) -> int:
        return len(self.layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if i > 0:
                x = F.silu(x)
            x = layer(x)
            if i < last or self.dropout_last:
                x = self.dropout(x)
        return x


def ffn(x: torch.Tensor, weights: Sequence[torch.Tensor], biases: Sequence[torch.Tensor]) -> torch.Tensor:
    """Functional FFN_L with weights stored as (out, in) matrices."""
    if len(weights) != len(biases) or not weights:
        raise ValueError("need one bias per weight matrix")
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.shape[-1] != x.shape[-1] or b.shape[-1] != w.shape[0]:
            raise ValueError(f"layer {i + 1}: weight {tuple(w.shape)} does not fit input {tuple(x.shape)}")
        if i > 0:
            x = F.silu(x)
        x = x @ w.T + b
    return x


class LocalAttention(nn.Module):
    """Grouped k x k local self-attention with relative key encodings r and query encoding s.

    The embedding is split into `groups` chunks, each projected by its own
    (d/g x d/g) Q/K/V matrices; the concatenated projections are re-split into
    `heads` chunks for scoring. Cells outside the grid act as zero keys/values
    while their relative encodings still enter the scores. No 1/sqrt(d) scaling.
    """

    def __init__(self, d_emb: int, groups: int, heads: int, kernel: int = 3, dropout: float = 0.0):
        super().__init__()
        if d_emb % groups or d_emb % heads:
            raise ValueError(f"groups ({groups}) and heads ({heads}) must divide d_emb ({d_emb})")
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.d_emb, self.groups, self.heads, self.kernel = d_emb, groups, heads, kernel
        gs = d_emb // groups
        scale = gs ** -0.5
        self.w_q = nn.Parameter(torch.randn(groups, gs, gs) * scale)
        self.w_k = nn.Parameter(torch.randn(groups, gs, gs) * scale)
        self.w_v = nn.Parameter(torch.randn(groups, gs, gs) * scale)
        self.rel = nn.Parameter(torch.randn(kernel, kernel, d_emb) * d_emb ** -0.5)
        self.query_enc = nn.Parameter(torch.zeros(d_emb))
        self.dropout = nn.Dropout(dropout)

    def project(self, grid: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
        *lead, d = grid.shape
        chunks = grid.reshape(*lead, self.groups, d // self.groups)
        return torch.einsum("...gi,gio->...go", chunks, weight).reshape(*lead, d)

    def qkv(self, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.project(grid, self.w_q), self.project(grid, self.w_k), self.project(grid, self.w_v)

    def neighbourhoods(self, x: torch.Tensor) -> torch.Tensor:
        """(B, H, W, d) -> (B, H, W, k*k, d) zero-padded k x k neighbourhoods, row-major offsets."""
        _, h, w, _ = x.shape
        k, p = self.kernel, self.kernel // 2
        xp = F.pad(x, (0, 0, p, p, p, p))
        return torch.stack([xp[:, a:a + h, b:b + w] for a in range(k) for b in range(k)], dim=3)

    def _scores(self, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q, k, v = self.qkv(grid)
        b, h, w, d = grid.shape
        dh = d // self.heads
        kn = self.neighbourhoods(k) + self.rel.reshape(-1, d)
        prod = (q + self.query_enc).unsqueeze(3) * kn
        scores = prod.view(b, h, w, -1, self.heads, dh).sum(-1)  # (B, H, W, k*k, heads)
        return scores, self.neighbourhoods(v)

    def scores(self, grid: torch.Tensor) -> torch.Tensor:
        """Pre-softmax scores, shape (B, H, W, heads, k*k)."""
        return self._scores(grid)[0].transpose(-1, -2)

    def attention(self, grid: torch.Tensor) -> torch.Tensor:
        """Attention weights (B, H, W, heads, k*k); each row sums to one."""
        return torch.softmax(self.scores(grid), dim=-1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        scores, vn = self._scores(grid)
        attn = torch.softmax(scores, dim=3)
        b, h, w, d = grid.shape
        vn = vn.view(b, h, w, -1, self.heads, d // self.heads)
        out = (attn.unsqueeze(-1) * vn).sum(3).reshape(b, h, w, d)
        return self.dropout(out)


def local_attention(grid: torch.Tensor, params: LocalAttention) -> torch.Tensor:
    return params(grid)


class ConvTransfBlock(nn.Module):
    """Post-norm transformer block: LN(G + attn(G)) then LN(G' + FFN_3(G'))."""

    def __init__(
        self,
        d_emb: int,
        groups: int,
        heads: int,
        kernel: int = 3,
        hidden: int = 256,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.attn = LocalAttention(d_emb, groups, heads, kernel, dropout)
        self.norm1 = nn.LayerNorm(d_emb, eps=LN_EPS)
        self.ffn = FFN([d_emb, hidden, hidden, d_emb], dropout)
        self.norm2 = nn.LayerNorm(d_emb, eps=LN_EPS)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        g = self.norm1(grid + self.attn(grid))
        return self.norm2(g + self.ffn(g))


def conv_transf_block(grid: torch.Tensor, params: ConvTransfBlock) -> torch.Tensor:
    return params(grid)


@dataclass
class UTRun:
    """Outcome of running the recurrent block.

    `grids[n]` is the grid after n+1 block applications. `lambdas` holds the
    halting probabilities emitted after each application (empty without a
    halting module). `steps` is the number of block applications each sample
    used before halting (training mode: its horizon N plus one).
    """

    final: torch.Tensor
    grids: list[torch.Tensor]
    lambdas: torch.Tensor
    steps: torch.Tensor
    halted: torch.Tensor = field(default=None)


def ut_run(
    grid: torch.Tensor,
    block: ConvTransfBlock,
    halting: "ContextTransformer | None" = None,
    max_steps: int = 40,
    eps: float = 0.05,
    sample: bool = False,
    deterministic: bool = False,
    generator: torch.Generator | None = None,
) -> UTRun:
    """Apply `block` recurrently with shared weights.

    Without `halting` exactly `max_steps` applications are made. With it,
    training mode (`sample=False`) rolls every sample until its cumulative
    halting mass reaches 1 - eps (or the cap) and keeps all intermediate grids
    for the expected loss. Evaluation mode (`sample=True`) draws the halting
    events and freezes each sample's grid once it halts.
    """
    from .halting import sample_halt

    b = grid.shape[0]
    grids: list[torch.Tensor] = []
    if halting is None:
        for _ in range(max_steps):
            grid = block(grid)
            grids.append(grid)
        steps = torch.full((b,), max_steps, dtype=torch.long)
        return UTRun(grid, grids, grid.new_zeros(b, 0), steps, torch.ones(b, dtype=torch.bool))

    ctx = halting.initial_state(b, grid)
    lambdas = []
    if not sample:
        survive = torch.ones(b, dtype=grid.dtype)
        horizon = torch.full((b,), -1, dtype=torch.long)
        for n in range(max_steps):
            grid = block(grid)
            grids.append(grid)
            ctx, lam = halting(ctx, grid)
            lambdas.append(lam)
            with torch.no_grad():
                survive = survive * (1 - lam.detach())
                reached = (horizon < 0) & (1 - survive >= 1 - eps)
                horizon[reached] = n
            if bool((horizon >= 0).all()):
                break
        horizon[horizon < 0] = len(grids) - 1
        lam_t = torch.stack(lambdas, dim=1)
        final = torch.stack(grids, dim=1)[torch.arange(b), horizon]
        return UTRun(final, grids, lam_t, horizon + 1, torch.ones(b, dtype=torch.bool))

    halted = torch.zeros(b, dtype=torch.bool)
    steps = torch.full((b,), max_steps, dtype=torch.long)
    for n in range(max_steps):
        new = block(grid)
        keep = halted.view(-1, *([1] * (grid.dim() - 1)))
        grid = torch.where(keep, grid, new)
        grids.append(grid)
        ctx, lam = halting(ctx, grid)
        lambdas.append(lam)
        stop = sample_halt(lam, generator=generator, deterministic=deterministic) & ~halted
        steps[stop] = n + 1
        halted = halted | stop
        if bool(halted.all()):
            break
    return UTRun(grid, grids, torch.stack(lambdas, dim=1), steps, halted)
