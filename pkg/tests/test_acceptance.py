"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The training criteria (6, 8) cache finished runs under ``.acceptance_runs/``
(override with GRIDADD_ACCEPT_DIR); runs are deterministic, so a cached
result is the same one a fresh run would produce. Criterion 7 is the full
810-epoch schedule and only runs when GRIDADD_LONG_RUN=1.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from gridadd.config import default_config, smoke_config
from gridadd.datagen import ProblemSpec
from gridadd.evaluation import SuiteEntry, char_seq_accuracy, format_score, run_suite
from gridadd.gradcheck import report, run_all
from gridadd.halting import (
    entropy,
    expected_log_steps,
    halting_distribution,
    kl_closed_form,
)
from gridadd.seq2grid import fold
from gridadd.training import Trainer, overtrain, summarize_metrics, read_metrics
from test_conv_ut import naive_sasa
from test_evaluation import CORPUS, codes
from test_seq2grid import grid_from_rows, hard_fold, one_hot

ROOT = Path(__file__).resolve().parents[1]
RUNS = Path(os.environ.get("GRIDADD_ACCEPT_DIR", ROOT / ".acceptance_runs"))
SMOKE_SEEDS = (0, 1, 2)
SMOKE_TARGET = 0.95
SMOKE_BUDGET_S = 30 * 60


def record(n: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    ACCEPTANCE[n] = (status, detail)
    print(f"criterion {n}: {status} - {detail}")


def test_criterion_1_seq2grid_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        s, h, w = int(rng.integers(1, 13)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
        vecs = torch.as_tensor(rng.normal(size=(s, 3)))
        acts = rng.integers(0, 3, size=s).tolist()
        soft = fold(vecs[None], one_hot(acts)[None], h, w)[0]
        hard = grid_from_rows(hard_fold(list(range(s)), acts, h, w), vecs)
        mismatches += not torch.equal(soft, hard)
    elapsed = time.time() - t0
    ok = mismatches == 0 and elapsed < 60
    record(1, ok, f"{1000 - mismatches}/1000 sequences cell-exact in {elapsed:.1f}s")
    assert ok


def test_criterion_2_gradcheck():
    t0 = time.time()
    results = run_all(0)
    elapsed = time.time() - t0
    worst = max(r.max_rel_error for r in results)
    ok = worst <= 1e-4 and elapsed < 300
    print(report(results))
    record(2, ok, f"max relative error {worst:.2e} over {len(results)} checks in {elapsed:.0f}s")
    assert ok


def test_criterion_3_halting_math():
    rng = np.random.default_rng(3)
    exact = 0
    for _ in range(1000):
        lams = rng.uniform(0, 1, size=int(rng.integers(1, 60))).tolist()
        dist = halting_distribution(lams, eps=0.05, max_steps=40)
        total = 0.0
        for p in dist.probs:
            total += p
        exact += abs(total - 1.0) <= 2 ** -50
    half = halting_distribution([0.5] * 50, eps=0.05)
    half_ok = half.horizon == 4 and half.probs == [0.5, 0.25, 0.125, 0.0625, 0.0625]

    kl_err, bound_ok = 0.0, True
    for _ in range(500):
        n = int(rng.integers(1, 41))
        lam_p = float(rng.uniform(0.05, 0.95))
        p = torch.as_tensor(rng.dirichlet(np.ones(n)))
        k = torch.arange(n, dtype=torch.float64)
        direct = (p * (torch.log(p) - torch.log(lam_p * (1 - lam_p) ** k))).sum()
        kl_err = max(kl_err, abs(kl_closed_form(p, lam_p).item() - direct.item()))
        hi = math.log(n) + 1e-12
        bound_ok &= -1e-12 <= entropy(p).item() <= hi and -1e-12 <= expected_log_steps(p).item() <= hi
    ok = exact == 1000 and half_ok and kl_err <= 1e-10 and bound_ok
    record(3, ok, f"normalized {exact}/1000 (|sum-1|<=2^-50), lambda=0.5 case {'ok' if half_ok else 'wrong'}, "
                  f"closed-form KL err {kl_err:.1e}, ER bounds {'hold' if bound_ok else 'violated'}")
    assert ok


def test_criterion_4_attention_structure():
    from gridadd.conv_ut import LocalAttention
    from gridadd.analysis import attention_decomposition

    torch.manual_seed(4)
    attn = LocalAttention(8, 2, 4).double()
    sasa = LocalAttention(8, 4, 4).double()
    with torch.no_grad():
        attn.query_enc.normal_()
        sasa.query_enc.normal_()
    grid = torch.randn(2, 5, 6, 8, dtype=torch.float64) * 2
    w = attn.attention(grid)
    norm_err = (w.sum(-1) - 1).abs().max().item()

    dec_err = 0.0
    for head in range(4):
        for i in range(5):
            for j in range(6):
                m = attention_decomposition(attn, grid[0], head, (i, j))
                dec_err = max(dec_err, float(np.abs(sum(m.terms.values()) - m.score).max()))

    eq_err = 0.0
    for seed in range(20):
        g = torch.zeros(1, 9, 12, 8, dtype=torch.float64)
        g[0, 3:6, 3:6] = torch.randn(3, 3, 8, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        out, out_s = attn(g), attn(torch.roll(g, 1, dims=2))
        eq_err = max(eq_err, (torch.roll(out, 1, dims=2) - out_s)[:, 1:-1, 2:-1].abs().max().item())

    small = torch.randn(2, 3, 4, 8, dtype=torch.float64)
    sasa_err = (sasa(small) - naive_sasa(sasa, small)).abs().max().item()
    ok = norm_err <= 1e-6 and dec_err <= 1e-10 and eq_err <= 1e-5 and sasa_err <= 1e-6
    record(4, ok, f"normalization {norm_err:.1e}, decomposition {dec_err:.1e}, translation {eq_err:.1e}, SASA {sasa_err:.1e}")
    assert ok


def test_criterion_5_metrics_oracle():
    wrong = [c for c in CORPUS if (lambda t: (t.correct, t.valid, t.seq_flags[0]))(char_seq_accuracy(codes(c[0]), codes(c[1]))) != c[2:]]
    prints = {1.0: "1.0", 0.999: "0.99", 0.99: "0.99", 0.9951: "0.99", 0.5: "0.50"}
    bad_print = [v for v, s in prints.items() if format_score(v) != s]
    ok = not wrong and not bad_print
    record(5, ok, f"{len(CORPUS) - len(wrong)}/{len(CORPUS)} corpus cases exact, print rule {'ok' if not bad_print else bad_print}")
    assert ok


def _run_dir(cfg) -> Path:
    return RUNS / cfg.run_name()


def smoke_run(variant: str, seed: int) -> dict:
    """Train the desk-scale preset (or load its cached result) and evaluate in-distribution."""
    cfg = smoke_config(variant, seed)
    out = _run_dir(cfg)
    done = out / "result.json"
    if done.exists():
        return json.loads(done.read_text())
    if out.exists():
        for f in out.iterdir():
            f.unlink()
    t0 = time.time()
    trainer = Trainer(cfg, out)
    for _ in trainer.fit(cfg.train.epochs):
        pass
    train_s = time.time() - t0
    entry = SuiteEntry("in_dist", ProblemSpec(tuple(cfg.data.train_terms), tuple(cfg.data.train_digits)), 1000)
    row = run_suite(trainer.model, [entry], seed=10_000 + seed)[0]
    total_s = time.time() - t0
    summary = summarize_metrics(read_metrics(out / "metrics.jsonl"))
    result = {
        "variant": variant, "seed": seed, "run": cfg.run_name(), "char_acc": row.char_acc, "seq_acc": row.seq_acc,
        "eval_mean_steps": row.mean_steps, "train_seconds": train_s, "total_seconds": total_s,
        "epoch_mean_steps": [s["mean_steps"] for s in summary], "epoch_char_acc": [s["char_acc"] for s in summary],
    }
    done.write_text(json.dumps(result, indent=1))
    return result


def test_criterion_6_smoke_training():
    results = []
    for seed in SMOKE_SEEDS:
        res = smoke_run("base", seed)
        results.append(res)
        print(f"  seed {seed}: char {res['char_acc']:.4f} seq {res['seq_acc']:.4f} "
              f"train {res['train_seconds'] / 60:.1f} min, total {res['total_seconds'] / 60:.1f} min")
        if res["char_acc"] >= SMOKE_TARGET and res["total_seconds"] <= SMOKE_BUDGET_S:
            break
    best = max(results, key=lambda r: r["char_acc"])
    ok = any(r["char_acc"] >= SMOKE_TARGET and r["total_seconds"] <= SMOKE_BUDGET_S for r in results)
    detail = "; ".join(f"seed {r['seed']} char {r['char_acc']:.3f} in {r['total_seconds'] / 60:.1f} min" for r in results)
    record(6, ok, f"best char acc {best['char_acc']:.3f} (target {SMOKE_TARGET}); {detail}")
    assert ok


@pytest.mark.skipif(os.environ.get("GRIDADD_LONG_RUN") != "1", reason="optional long run; set GRIDADD_LONG_RUN=1")
def test_criterion_7_full_schedule():
    cfg = default_config("base")
    out = _run_dir(cfg)
    trainer = Trainer(cfg, out)
    for _ in trainer.fit(cfg.train.epochs):
        pass
    for _ in overtrain(trainer.checkpoint(), out_dir=out):
        pass
    model = Trainer.from_checkpoint(out / "checkpoint.pt").model
    rows = run_suite(model, [SuiteEntry("in_dist", ProblemSpec((1, 4), (1, 10))), SuiteEntry("terms_5_6", ProblemSpec((5, 6), (1, 10)))], seed=77)
    ok = rows[0].seq_acc >= 0.9 and rows[1].seq_acc > 0
    record(7, ok, f"in-dist seq {rows[0].seq_acc:.3f} (>=0.9), [5,6] terms seq {rows[1].seq_acc:.3f} (>0)")
    assert ok


def test_criterion_7_skip_notice():
    if os.environ.get("GRIDADD_LONG_RUN") != "1":
        ACCEPTANCE[7] = ("SKIPPED", "optional 810-epoch run; set GRIDADD_LONG_RUN=1 to execute")
        print("criterion 7: SKIPPED - optional long run")


def test_criterion_8_er_vs_kl_steps():
    from gridadd.plots import plot_training_steps

    seeds = SMOKE_SEEDS[:2]
    curves, verdicts, lines = {}, [], []
    for seed in seeds:
        er, kl = smoke_run("base", seed), smoke_run("ponderReg", seed)
        m_er, m_kl = float(np.mean(er["epoch_mean_steps"])), float(np.mean(kl["epoch_mean_steps"]))
        verdicts.append(m_er <= m_kl)
        lines.append(f"seed {seed}: ER {m_er:.2f} vs KL {m_kl:.2f}")
        curves[f"ER seed {seed}"] = list(enumerate(er["epoch_mean_steps"]))
        curves[f"KL seed {seed}"] = list(enumerate(kl["epoch_mean_steps"]))
    RUNS.mkdir(parents=True, exist_ok=True)
    plot_training_steps(curves, RUNS / "er_vs_kl_steps.svg")
    with open(RUNS / "er_vs_kl_steps.csv", "w", encoding="utf-8") as fh:
        fh.write("run,epoch,mean_steps\n")
        for name, pts in curves.items():
            for e, s in pts:
                fh.write(f"{name},{e},{s:.4f}\n")
    if all(verdicts):
        ok, note = True, "ER <= KL on every seed"
    elif not any(verdicts):
        ok, note = False, "ER > KL on every seed"
    else:
        ok, note = True, "seeds disagree, report-only"
    record(8, ok, f"{note}; " + "; ".join(lines))
    assert ok
