"""Finite-difference gradient checks for the differentiable modules.

Analytic gradients come from autograd; the reference is a plain central
difference computed coordinate by coordinate, in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .config import RunConfig, tiny_config
from .conv_ut import ConvTransfBlock
from .datagen import GridPolicy, make_batch, make_instance
from .halting import ContextTransformer
from .model import build_model
from .seq2grid import Seq2Grid
from .training import batch_loss

DENOM_FLOOR = 1e-5


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_coords: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def central_difference(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-6) -> list[torch.Tensor]:
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = DENOM_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all coordinates."""
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor))
    return float(((analytic - numeric).abs() / denom).max()) if analytic.numel() else 0.0


def check(name: str, fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-6) -> GradCheckResult:
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    numeric = central_difference(fn, params, h)
    err = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    return GradCheckResult(name, err, sum(p.numel() for p in params))


def _leaf(t: torch.Tensor) -> torch.Tensor:
    return t.detach().clone().requires_grad_(True)


def check_seq2grid(seed: int = 0, d: int = 4, size: int = 3) -> GradCheckResult:
    torch.manual_seed(seed)
    s2g = Seq2Grid(d, 5).double().eval()
    xs = _leaf(torch.randn(2, 6, d, dtype=torch.float64))
    probe = torch.randn(2, size, size, d, dtype=torch.float64)
    return check("seq2grid", lambda: (s2g(xs, size, size) * probe).sum(), [xs, *s2g.parameters()])


def check_block(seed: int = 0, d: int = 4, size: int = 3, groups: int = 2, heads: int = 4) -> GradCheckResult:
    torch.manual_seed(seed)
    block = ConvTransfBlock(d, groups, heads, 3, 6).double().eval()
    with torch.no_grad():
        block.attn.query_enc.normal_()
    grid = _leaf(torch.randn(2, size, size, d, dtype=torch.float64))
    probe = torch.randn(2, size, size, d, dtype=torch.float64)
    return check(f"conv_ut_block(g={groups},h={heads})", lambda: (block(grid) * probe).sum(), [grid, *block.parameters()])


def check_context(seed: int = 0, d: int = 4, size: int = 3) -> GradCheckResult:
    torch.manual_seed(seed)
    ctx = ContextTransformer(d, 3, 2, 5, 5).double().eval()
    grid = _leaf(torch.randn(2, size, size, d, dtype=torch.float64))
    c = _leaf(torch.randn(2, 3, d, dtype=torch.float64))
    probe = torch.randn(2, 3, d, dtype=torch.float64)

    def fn():
        new, lam = ctx(c, grid)
        return (new * probe).sum() + 3.0 * lam.sum()

    return check("context_step", fn, [c, grid, *ctx.parameters()])


def _tiny_batch(size: int = 3):
    insts = [make_instance(t) for t in (["5", "7"], ["9"], ["3", "4", "9"])]
    batch = make_batch(insts, GridPolicy(0, 2, (0, 0), (0, 0)))
    batch.grid_dims = (size, size)
    return batch


def check_ponder_loss(variant: str = "base", seed: int = 0, size: int = 3) -> GradCheckResult:
    cfg: RunConfig = tiny_config(variant)
    model = build_model(cfg.model, torch.float64, seed=seed).eval()
    with torch.no_grad():
        model.block.attn.query_enc.normal_()
    batch = _tiny_batch(size)
    fn = lambda: batch_loss(model, batch, cfg, 0.05).total  # noqa: E731
    return check(f"ponder_loss[{variant}]", fn, list(model.parameters()))


def run_all(seed: int = 0) -> list[GradCheckResult]:
    return [
        check_seq2grid(seed),
        check_block(seed),
        check_block(seed, groups=1, heads=4),
        check_block(seed, groups=2, heads=2),
        check_context(seed),
        check_ponder_loss("base", seed),
        check_ponder_loss("ponderReg", seed),
        check_ponder_loss("fixedTime", seed),
    ]


def report(results: Sequence[GradCheckResult], tol: float = 1e-4) -> str:
    lines = [f"{r.name:32s} coords={r.n_coords:5d} max_rel_err={r.max_rel_error:.3e} {'PASS' if r.passed(tol) else 'FAIL'}" for r in results]
    worst = max(r.max_rel_error for r in results)
    lines.append(f"overall max relative error {worst:.3e} -> {'PASS' if worst <= tol else 'FAIL'}")
    return "\n".join(lines)


if __name__ == "__main__":  # pragma: no cover
    print(report(run_all()))
