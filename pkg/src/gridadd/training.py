"""Loss assembly and the optimisation schedule (standard run and overtraining phase)."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig, config_from_dict
from .datagen import PAD, batch_rng, sample_batch
from .evaluation import batch_char_accuracy
from .halting import batched_halting_distribution, er_regularizer, kl_geometric_regularizer
from .model import GridUT, build_model

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gridadd-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at epoch {record['epoch']} step {record['step']}")
        self.record = record


def weighted_cross_entropy(logits: torch.Tensor, target: torch.Tensor, pad_weight: float = 0.1) -> torch.Tensor:
    """Mean over cells of -w(target) log p(target), with PAD cells weighted `pad_weight`.

    `logits` is (..., W, V) and `target` (..., W); returns one value per row.
    """
    target = torch.as_tensor(target, dtype=torch.long)
    if logits.shape[:-1] != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")
    nll = -F.log_softmax(logits, dim=-1).gather(-1, target.unsqueeze(-1)).squeeze(-1)
    w = torch.where(target == PAD, torch.tensor(pad_weight, dtype=nll.dtype), torch.tensor(1.0, dtype=nll.dtype))
    return (w * nll).mean(-1)


def ponder_loss(step_losses: torch.Tensor, p: torch.Tensor, reg: torch.Tensor | float, beta: float) -> torch.Tensor:
    """sum_n p_n L_n + beta R over the last axis."""
    if step_losses.shape != p.shape:
        raise ValueError(f"{tuple(step_losses.shape)} step losses for {tuple(p.shape)} probabilities")
    return (p * step_losses).sum(-1) + beta * reg


@dataclass
class LossBreakdown:
    total: torch.Tensor
    expected: float
    reg: float
    mean_steps: float
    char_acc: float


def batch_loss(model: GridUT, batch, cfg: RunConfig, beta: float) -> LossBreakdown:
    out = model(batch.inputs, batch.grid_dims)
    target = torch.as_tensor(batch.target_rows())
    logits = out.step_logits(model.readout)
    t = logits.shape[1]
    step_losses = weighted_cross_entropy(logits, target.unsqueeze(1).expand(-1, t, -1), cfg.train.pad_weight)
    rows = torch.arange(len(target))
    horizon = out.run.steps - 1
    with torch.no_grad():
        acc = batch_char_accuracy(logits[rows, horizon].argmax(-1), target)
    if not model.cfg.halting:
        loss = step_losses[:, -1].mean()
        return LossBreakdown(loss, float(loss.detach()), 0.0, float(t), float(acc.mean()))

    p = batched_halting_distribution(out.run.lambdas, horizon)
    if model.cfg.regularizer == "kl":
        reg = kl_geometric_regularizer(p, model.cfg.lambda_p, horizon)
    else:
        reg = er_regularizer(p, acc.to(p.dtype))
    per_sample = ponder_loss(step_losses, p, reg, beta)
    expected = (p * step_losses).sum(-1)
    return LossBreakdown(
        per_sample.mean(), float(expected.detach().mean()), float(reg.detach().mean()),
        float(out.run.steps.double().mean()), float(acc.mean()),
    )


def cosine_lr(epoch: float, lr_max: float, lr_min: float, period: float) -> float:
    """Cyclic cosine annealing from lr_max down to lr_min, restarting every `period` epochs."""
    phase = (epoch % period) / period
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * phase))


NO_DECAY_SUFFIXES = ("bias", "embed.weight", "attn.rel", "attn.query_enc")


def decay_flags(model: nn.Module) -> dict[str, bool]:
    """Which parameters receive weight decay: none of the biases, norms or embeddings."""
    flags = {}
    for name, p in model.named_parameters():
        is_norm = any(part.startswith("norm") for part in name.split("."))
        flags[name] = not (name.endswith(NO_DECAY_SUFFIXES) or is_norm)
    return flags


def make_optimizer(model: nn.Module, cfg: RunConfig) -> torch.optim.AdamW:
    flags = decay_flags(model)
    params = dict(model.named_parameters())
    groups = [
        {"params": [params[n] for n, d in flags.items() if d], "weight_decay": cfg.train.weight_decay},
        {"params": [params[n] for n, d in flags.items() if not d], "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.train.lr_max, betas=(cfg.train.beta1, cfg.train.beta2))


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step, 7]).generate_state(1)[0])


class Trainer:
    """Owns model, optimizer and epoch counter for one seeded run."""

    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None):
        self.cfg = cfg.validate()
        self.model = build_model(cfg.model, cfg.train.dtype, seed=cfg.seed)
        self.optimizer = make_optimizer(self.model, cfg)
        self.epoch = 0
        self.beta = cfg.train.beta_reg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))

    def lr_at(self, epoch: float) -> float:
        t = self.cfg.train
        return cosine_lr(epoch, t.lr_max, t.lr_min, t.lr_period)

    def train_step(self, step: int) -> dict:
        cfg = self.cfg
        spe = cfg.train.steps_per_epoch
        lr = self.lr_at(self.epoch + step / spe)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        torch.manual_seed(_step_seed(cfg.seed, self.epoch, step))
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        parts = []
        for gid, spec in enumerate(cfg.data.group_specs()):
            rng = batch_rng(cfg.seed, self.epoch, step, gid)
            batch = sample_batch(spec, cfg.data.batch_per_group, cfg.grid.policy(), rng, group_id=gid)
            parts.append(batch_loss(self.model, batch, cfg, self.beta))
        total = sum(p.total for p in parts)
        record = {
            "epoch": self.epoch,
            "step": step,
            "loss": float(total.detach()),
            "expected_loss": sum(p.expected for p in parts),
            "reg": sum(p.reg for p in parts) / len(parts),
            "mean_steps": sum(p.mean_steps for p in parts) / len(parts),
            "char_acc": sum(p.char_acc for p in parts) / len(parts),
            "lr": lr,
            "beta": self.beta,
        }
        if not math.isfinite(record["loss"]):
            self._emit(record | {"error": "non-finite loss"})
            raise TrainingDiverged(record)
        total.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.train.clip_norm)
        record["grad_norm"] = float(grad_norm)
        self.optimizer.step()
        self._emit(record)
        return record

    def _emit(self, record: dict) -> None:
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def run_epoch(self) -> list[dict]:
        records = [self.train_step(s) for s in range(self.cfg.train.steps_per_epoch)]
        self.epoch += 1
        last = records[-1]
        log.info(
            "epoch %d loss %.4f acc %.3f steps %.2f lr %.2e",
            self.epoch, last["loss"], last["char_acc"], last["mean_steps"], last["lr"],
        )
        return records

    def fit(self, epochs: int, beta: float | None = None) -> Iterator[dict]:
        """Run `epochs` more epochs, yielding a checkpoint after each."""
        if beta is not None:
            self.beta = beta
        for _ in range(epochs):
            records = self.run_epoch()
            ckpt = self.checkpoint()
            ckpt["records"] = records
            if self.out_dir is not None:
                self.save(self.out_dir / "checkpoint.pt", ckpt)
                every = self.cfg.train.checkpoint_every
                if every and self.epoch % every == 0:
                    self.save(self.out_dir / f"checkpoint-e{self.epoch:04d}.pt", ckpt)
            yield ckpt

    def checkpoint(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "beta": self.beta,
            "model": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "optimizer": self.optimizer.state_dict(),
            "params": {k: list(v.shape) for k, v in self.model.state_dict().items()},
        }

    @staticmethod
    def save(path: str | Path, ckpt: dict) -> None:
        torch.save({k: v for k, v in ckpt.items() if k != "records"}, path)

    @classmethod
    def from_checkpoint(cls, ckpt: dict | str | Path, out_dir: str | Path | None = None) -> "Trainer":
        if not isinstance(ckpt, dict):
            ckpt = load_checkpoint(ckpt)
        trainer = cls(config_from_dict(ckpt["config"]), out_dir)
        trainer.model.load_state_dict(ckpt["model"])
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        trainer.epoch = ckpt["epoch"]
        trainer.beta = ckpt["beta"]
        return trainer


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt['version']}")
    return ckpt


def load_model(path: str | Path) -> tuple[GridUT, RunConfig]:
    ckpt = load_checkpoint(path)
    cfg = config_from_dict(ckpt["config"])
    model = build_model(cfg.model, cfg.train.dtype)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, cfg


def train(cfg: RunConfig, out_dir: str | Path | None = None) -> Iterator[dict]:
    """Standard training run; yields one checkpoint per epoch."""
    trainer = Trainer(cfg, out_dir)
    yield from trainer.fit(cfg.train.epochs)


def overtrain(ckpt: dict | str | Path, cfg: RunConfig | None = None, out_dir: str | Path | None = None) -> Iterator[dict]:
    """Continue a finished run for `overtrain_epochs` with the lowered regularizer weight."""
    trainer = Trainer.from_checkpoint(ckpt, out_dir)
    if cfg is not None:
        trainer.cfg = cfg.validate()
    yield from trainer.fit(trainer.cfg.train.overtrain_epochs, beta=trainer.cfg.train.overtrain_beta)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summarize_metrics(records: list[dict]) -> list[dict]:
    """Per-epoch means of the step records."""
    by_epoch: dict[int, list[dict]] = {}
    for r in records:
        by_epoch.setdefault(r["epoch"], []).append(r)
    out = []
    for epoch, rs in sorted(by_epoch.items()):
        out.append({k: float(np.mean([r[k] for r in rs])) for k in ("loss", "reg", "mean_steps", "char_acc", "lr")} | {"epoch": epoch})
    return out


__all__ = [
    "Trainer", "TrainingDiverged", "LossBreakdown", "batch_loss", "cosine_lr", "decay_flags",
    "load_checkpoint", "load_model", "overtrain", "ponder_loss", "train", "weighted_cross_entropy",
]
