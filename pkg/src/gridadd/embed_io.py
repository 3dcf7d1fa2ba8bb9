"""Symbol embeddings and the top-row readout."""

from __future__ import annotations

import math

import torch
from torch import nn

from .datagen import VOCAB_SIZE


class TokenEmbedding(nn.Module):
    """Lookup table E mapping each of the 13 symbols to a d_emb vector (no positions)."""

    def __init__(self, d_emb: int, vocab_size: int = VOCAB_SIZE):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(vocab_size, d_emb) / math.sqrt(d_emb))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return embed(tokens, self.weight)


class OutputProjection(nn.Module):
    """Linear map from cell vectors to symbol logits; not tied to the embedding."""

    def __init__(self, d_emb: int, vocab_size: int = VOCAB_SIZE):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(d_emb, vocab_size) / math.sqrt(d_emb))
        self.bias = nn.Parameter(torch.zeros(vocab_size))

    def forward(self, cells: torch.Tensor) -> torch.Tensor:
        """Logits for every cell; softmax is left to the caller."""
        return cells @ self.weight + self.bias


def embed(tokens: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.numel() and (tokens.min() < 0 or tokens.max() >= table.shape[0]):
        raise ValueError(f"symbol code out of range [0, {table.shape[0]})")
    return table[tokens]


def project_output(top_row: torch.Tensor, proj: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Per-cell distributions over the alphabet for a (..., W, d_emb) top row."""
    logits = top_row @ proj
    if bias is not None:
        logits = logits + bias
    return torch.softmax(logits, dim=-1)


def decode(dist: torch.Tensor) -> torch.Tensor:
    """Most probable symbol per cell; ties go to the lowest code."""
    return torch.argmax(dist, dim=-1)
