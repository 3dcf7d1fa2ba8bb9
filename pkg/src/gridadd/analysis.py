"""Interpretability exports: action traces, attention-rule decomposition, PCA of cell vectors,
and the handpicked error probes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .conv_ut import LocalAttention
from .datagen import EQUALS, PAD, PLUS, SYMBOLS, GridPolicy, encode, grid_dims, parse_expression, target_row, to_text

# expressions from the paper's table of representative errors
ERROR_PROBES = (
    "11134+1+1+1+1+1=",
    "1+1+1+1+1+11134=",
    "1+1+1+1+1+1+1+11134=",
    "99999+1=",
    "999999999+1=",
    "999990000+9999+1=",
    "1+1+1+1+1+1=",
    "1+1+1+1+1+1+1=",
)


@dataclass
class AttentionRuleMap:
    """k x k maps for one head at one query cell; offsets are row-major around the query."""

    head: int
    position: tuple[int, int]
    query_key: np.ndarray
    query_pos: np.ndarray
    bias_key: np.ndarray
    bias_pos: np.ndarray
    score: np.ndarray
    weights: np.ndarray

    @property
    def terms(self) -> dict[str, np.ndarray]:
        return {"QK": self.query_key, "Qr": self.query_pos, "sK": self.bias_key, "sr": self.bias_pos}


def _attention_module(model) -> LocalAttention:
    return model if isinstance(model, LocalAttention) else model.block.attn


@torch.no_grad()
def attention_decomposition(model, grid: torch.Tensor, head: int, position: tuple[int, int]) -> AttentionRuleMap:
    """Split the pre-softmax score (Q+s).(K+r) into its four products for one head and query."""
    attn = _attention_module(model)
    if grid.dim() == 3:
        grid = grid.unsqueeze(0)
    _, h, w, d = grid.shape
    i, j = position
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"position {position} outside the {h}x{w} grid")
    if not 0 <= head < attn.heads:
        raise ValueError(f"head {head} outside 0..{attn.heads - 1}")
    grid = grid.to(attn.w_q.dtype)
    q, k, _ = attn.qkv(grid)
    dh = d // attn.heads
    sl = slice(head * dh, (head + 1) * dh)
    qv = q[0, i, j, sl]
    kn = attn.neighbourhoods(k)[0, i, j, :, sl]
    rel = attn.rel.reshape(-1, d)[:, sl]
    s = attn.query_enc[sl]
    kk = attn.kernel
    parts = [kn @ qv, rel @ qv, kn @ s, rel @ s]
    score = attn.scores(grid)[0, i, j, head]
    weights = torch.softmax(score, dim=-1)
    as_map = lambda t: t.reshape(kk, kk).double().numpy()  # noqa: E731
    return AttentionRuleMap(head, (i, j), *(as_map(p) for p in parts), as_map(score), as_map(weights))


@dataclass
class ActionTrace:
    symbols: list[str]
    probs: np.ndarray  # (S, 3): TLU, NLP, NOP
    grid: list[list[str]]  # nearest symbol per cell, "_" for empty cells

    def rows(self) -> list[tuple[str, float, float, float]]:
        return [(s, *map(float, p)) for s, p in zip(self.symbols, self.probs)]


def _dims_for(expression: str, policy: GridPolicy | None) -> tuple[int, int]:
    inst = parse_expression(expression)
    return grid_dims(len(inst.terms), max(inst.max_digits, len(inst.result)), policy or GridPolicy())


@torch.no_grad()
def nearest_symbols(cells: torch.Tensor, table: torch.Tensor, empty_tol: float = 1e-6) -> list:
    """Label each vector by its closest embedding row; near-zero vectors are empty."""
    flat = cells.reshape(-1, cells.shape[-1]).to(table.dtype)
    dist = torch.cdist(flat, table[1:])
    idx = dist.argmin(-1) + 1
    labels = ["_" if v.norm() < empty_tol else SYMBOLS[c] for v, c in zip(flat, idx.tolist())]
    return np.array(labels, dtype=object).reshape(cells.shape[:-1]).tolist()


@torch.no_grad()
def dump_action_probs(model, expression: str, dims: tuple[int, int] | None = None) -> ActionTrace:
    was = model.training
    model.eval()
    try:
        dims = dims or _dims_for(expression, None)
        tokens = encode(expression)[None]
        grid, actions = model.encode(tokens, dims)
    finally:
        model.train(was)
    symbols = [SYMBOLS[c] for c in tokens[0]]
    return ActionTrace(symbols, actions[0].double().numpy(), nearest_symbols(grid[0], model.embed.weight))


def write_action_trace(trace: ActionTrace, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token", "a_tlu", "a_nlp", "a_nop"])
        for sym, *p in trace.rows():
            writer.writerow([sym, *(f"{x:.6f}" for x in p)])
        writer.writerow([])
        writer.writerow(["# grid (row 0 is the top row)"])
        for row in trace.grid:
            writer.writerow(row)


@dataclass
class PCAFit:
    mean: np.ndarray
    components: np.ndarray  # (n_components, d), orthonormal rows
    explained_ratio: np.ndarray  # all components, non-increasing

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca(vectors: np.ndarray, n_components: int = 2) -> PCAFit:
    """Exact PCA by eigendecomposition of the covariance; signs fixed so each
    component's largest-magnitude loading is positive."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least two vectors for PCA")
    mean = x.mean(0)
    cov = np.cov(x - mean, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    signs = np.sign(vecs[np.abs(vecs).argmax(0), np.arange(vecs.shape[1])])
    vecs = vecs * np.where(signs == 0, 1.0, signs)
    total = vals.sum()
    ratio = vals / total if total > 0 else np.zeros_like(vals)
    return PCAFit(mean, vecs[:, :n_components].T.copy(), ratio)


@dataclass
class PCARecord:
    step: int
    row: int
    col: int
    digit: str
    pc1: float
    pc2: float


@torch.no_grad()
def pca_tokens(model, batch, n_components: int = 2) -> tuple[PCAFit, list[PCARecord]]:
    """Pool every grid cell at every step, drop cells predicted as '+', '=' or PAD, project on 2 PCs.

    Uses the deterministic evaluation rollout so repeated calls give identical output.
    """
    was = model.training
    model.eval()
    try:
        out = model(batch.inputs, batch.grid_dims, sample=True, deterministic=True)
    finally:
        model.train(was)
    vecs, meta = [], []
    for step, g in enumerate(out.run.grids):
        pred = model.readout(g).argmax(-1)
        keep = (pred != PAD) & (pred != PLUS) & (pred != EQUALS)
        for b, i, j in keep.nonzero().tolist():
            vecs.append(g[b, i, j].double().numpy())
            meta.append((step, i, j, SYMBOLS[int(pred[b, i, j])]))
    if len(vecs) < 2:
        raise ValueError("fewer than two digit-predicting cells to project")
    fit = fit_pca(np.stack(vecs), n_components)
    proj = fit.transform(np.stack(vecs))
    records = [PCARecord(s, i, j, dg, float(p[0]), float(p[1]) if proj.shape[1] > 1 else 0.0) for (s, i, j, dg), p in zip(meta, proj)]
    return fit, records


def write_pca(records: Sequence[PCARecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "row", "col", "digit", "pc1", "pc2"])
        for r in records:
            writer.writerow([r.step, r.row, r.col, r.digit, f"{r.pc1:.6f}", f"{r.pc2:.6f}"])


@dataclass
class TaxonomyRow:
    expression: str
    prediction: str
    truth: str
    correct: bool
    steps: int


def error_taxonomy(model, expressions: Sequence[str] = ERROR_PROBES, policy: GridPolicy | None = None, deterministic: bool = True) -> list[TaxonomyRow]:
    rows = []
    for expr in expressions:
        inst = parse_expression(expr)
        dims = _dims_for(expr, policy)
        pred, steps = model.predict(encode(expr)[None], dims, deterministic=deterministic)
        text = to_text(pred[0].cpu().numpy())
        truth = inst.result
        correct = bool(np.array_equal(pred[0].cpu().numpy(), target_row(truth, dims[1])))
        rows.append(TaxonomyRow(expr, text, truth, correct, int(steps[0])))
    return rows


def write_taxonomy(rows: Sequence[TaxonomyRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expression", "prediction", "truth", "correct", "steps"])
        for r in rows:
            writer.writerow([r.expression, r.prediction, r.truth, int(r.correct), r.steps])


def write_attention_map(amap: AttentionRuleMap, path: str | Path) -> None:
    k = amap.score.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["head", "row", "col", "d_row", "d_col", "QK", "Qr", "sK", "sr", "score", "weight"])
        for a in range(k):
            for b in range(k):
                writer.writerow([
                    amap.head, *amap.position, a - k // 2, b - k // 2,
                    *(f"{m[a, b]:.8g}" for m in (amap.query_key, amap.query_pos, amap.bias_key, amap.bias_pos, amap.score, amap.weights)),
                ])
