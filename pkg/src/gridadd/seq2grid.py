"""Differentiable sequence-to-grid folding with mirrored TLU / NLP / NOP actions.

Row 0 is the top row and column W-1 the rightmost; new symbols always enter
at the top-right cell. When full, TLU drops the leftmost top cell and NLP
drops the bottom row.
"""

from __future__ import annotations

import torch
from torch import nn

from .conv_ut import FFN

TLU, NLP, NOP = 0, 1, 2


def tlu(grid: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Top List Update on (..., H, W, d) grids: shift the top row left and append x."""
    top = torch.cat([grid[..., 0, 1:, :], x.unsqueeze(-2)], dim=-2)
    return torch.cat([top.unsqueeze(-3), grid[..., 1:, :, :]], dim=-3)


def nlp(grid: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """New List Push: shift rows down and start a fresh top row holding only x."""
    top = torch.cat([torch.zeros_like(grid[..., 0, 1:, :]), x.unsqueeze(-2)], dim=-2)
    return torch.cat([top.unsqueeze(-3), grid[..., :-1, :, :]], dim=-3)


def s2g_step(grid: torch.Tensor, x: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Convex mix a_TLU*TLU(G, x) + a_NLP*NLP(G, x) + a_NOP*G; `actions` is (..., 3)."""
    a = actions[..., None, None, None]
    return a[..., TLU, :, :, :] * tlu(grid, x) + a[..., NLP, :, :, :] * nlp(grid, x) + a[..., NOP, :, :, :] * grid


class Seq2Grid(nn.Module):
    """Folds an embedded sequence into an H x W grid, one symbol at a time."""

    def __init__(self, d_emb: int, hidden: int = 64, dropout: float = 0.0):
        super().__init__()
        self.controller = FFN([d_emb, hidden, 3], dropout, dropout_last=False)

    def action_probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.controller(x), dim=-1)

    def forward(self, xs: torch.Tensor, height: int, width: int, return_actions: bool = False):
        """Encode (B, S, d) vectors into a (B, H, W, d) grid starting from zeros."""
        actions = self.action_probs(xs)
        grid = fold(xs, actions, height, width)
        return (grid, actions) if return_actions else grid


def fold(xs: torch.Tensor, actions: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Left fold of `s2g_step` over (B, S, d) vectors with (B, S, 3) action probabilities."""
    b, s, d = xs.shape
    grid = xs.new_zeros(b, height, width, d)
    for t in range(s):
        grid = s2g_step(grid, xs[:, t], actions[:, t])
    return grid


def action_probs(x: torch.Tensor, params: Seq2Grid) -> torch.Tensor:
    return params.action_probs(x)


def encode(xs: torch.Tensor, params: Seq2Grid, height: int, width: int) -> torch.Tensor:
    return params(xs, height, width)
