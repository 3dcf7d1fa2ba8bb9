"""The full grid Universal Transformer: embedding, Seq2Grid, recurrent block, halting, readout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .conv_ut import ConvTransfBlock, UTRun, ut_run
from .embed_io import OutputProjection, TokenEmbedding
from .halting import ContextTransformer
from .seq2grid import Seq2Grid


@dataclass
class Rollout:
    run: UTRun
    grid0: torch.Tensor
    actions: torch.Tensor  # (B, S, 3)

    def step_logits(self, readout: OutputProjection) -> torch.Tensor:
        """(B, T, W, V) top-row logits after every block application."""
        return readout(torch.stack([g[:, 0] for g in self.run.grids], dim=1))

    def final_logits(self, readout: OutputProjection) -> torch.Tensor:
        return readout(self.run.final[:, 0])


class GridUT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = TokenEmbedding(cfg.d_emb)
        self.s2g = Seq2Grid(cfg.d_emb, cfg.s2g_hidden, cfg.dropout)
        self.block = ConvTransfBlock(cfg.d_emb, cfg.groups, cfg.heads, cfg.kernel, cfg.ut_hidden, cfg.dropout)
        self.halting = (
            ContextTransformer(cfg.d_emb, cfg.context_len, cfg.ctx_heads, cfg.ctx_hidden, cfg.halt_hidden, cfg.dropout)
            if cfg.halting
            else None
        )
        self.readout = OutputProjection(cfg.d_emb)

    @property
    def step_cap(self) -> int:
        return self.cfg.max_steps if self.cfg.halting else self.cfg.fixed_steps

    def encode(self, tokens, dims: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        xs = self.embed(tokens).to(self.readout.weight.dtype)
        return self.s2g(xs, dims[0], dims[1], return_actions=True)

    def forward(
        self,
        tokens,
        dims: tuple[int, int],
        sample: bool = False,
        generator: torch.Generator | None = None,
        deterministic: bool = False,
        max_steps: int | None = None,
    ) -> Rollout:
        """Training rollouts (`sample=False`) keep every step for the expected loss;
        evaluation rollouts (`sample=True`) draw halting events."""
        grid0, actions = self.encode(tokens, dims)
        run = ut_run(
            grid0,
            self.block,
            self.halting,
            max_steps or self.step_cap,
            self.cfg.eps,
            sample=sample,
            deterministic=deterministic,
            generator=generator,
        )
        return Rollout(run, grid0, actions)

    @torch.no_grad()
    def predict(self, tokens, dims, generator=None, deterministic=False) -> tuple[torch.Tensor, torch.Tensor]:
        """Decoded top rows (B, W) and halting step counts (B,) in evaluation mode."""
        was_training = self.training
        self.eval()
        try:
            out = self(tokens, dims, sample=True, generator=generator, deterministic=deterministic)
        finally:
            self.train(was_training)
        return torch.argmax(out.final_logits(self.readout), dim=-1), out.run.steps


def build_model(cfg: ModelConfig, dtype: str | torch.dtype = torch.float32, seed: int | None = None) -> GridUT:
    if seed is not None:
        torch.manual_seed(seed)
    if isinstance(dtype, str):
        dtype = getattr(torch, dtype)
    return GridUT(cfg).to(dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
