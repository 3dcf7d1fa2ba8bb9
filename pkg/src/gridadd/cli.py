"""Command-line entry point: gen, train, overtrain, eval, analyze, gradcheck."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis, evaluation, plots
from .config import PRESETS, ConfigError, RunConfig, load_config, save_config
from .datagen import GridPolicy, ProblemSpec, make_batch, parse_expression, sample_batch, sample_problem, write_dataset
from .training import Trainer, TrainingDiverged, load_model, overtrain, read_metrics, summarize_metrics

log = logging.getLogger("gridadd")

OUT_ENV = "GRIDADD_OUT"


def _range(text: str) -> tuple[int, int]:
    parts = text.split(",")
    try:
        lo, hi = (int(parts[0]), int(parts[-1])) if len(parts) in (1, 2) else (None, None)
    except ValueError:
        lo = None
    if lo is None:
        raise argparse.ArgumentTypeError(f"expected 'a,b' or 'a', got {text!r}")
    return lo, hi


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV, "runs"))


def set_deterministic(flag: bool) -> None:
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
        if args.variant:
            raise ConfigError("--variant cannot override a config file; set it in [model]")
    else:
        cfg = PRESETS[args.preset](args.variant or "base")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.dtype:
        cfg.train.dtype = args.dtype
    return cfg.validate()


def cmd_gen(args) -> int:
    spec = ProblemSpec(args.terms, args.digits)
    rng = np.random.default_rng(args.seed)
    insts = [sample_problem(spec, rng) for _ in range(args.n)]
    if args.out:
        write_dataset(args.out, insts)
    else:
        for i in insts:
            sys.stdout.write(f"{'+'.join(i.terms)}=\t{i.result}\n")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run_dir = out_root(args.out_dir) / cfg.run_name()
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.cfg")
    trainer = Trainer(cfg, run_dir)
    try:
        for ckpt in trainer.fit(cfg.train.epochs):
            last = ckpt["records"][-1]
            log.info("epoch %d loss %.4f acc %.3f steps %.2f", ckpt["epoch"], last["loss"], last["char_acc"], last["mean_steps"])
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return 3
    print(run_dir / "checkpoint.pt")
    return 0


def cmd_overtrain(args) -> int:
    ckpt = Path(args.checkpoint)
    run_dir = Path(args.out_dir) if args.out_dir else ckpt.parent
    cfg = None
    if args.epochs is not None:
        cfg = load_model(ckpt)[1]
        cfg.train.overtrain_epochs = args.epochs
    try:
        for c in overtrain(ckpt, cfg, run_dir):
            last = c["records"][-1]
            log.info("epoch %d loss %.4f beta %.1e", c["epoch"], last["loss"], last["beta"])
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return 3
    print(run_dir / "checkpoint.pt")
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_model(args.checkpoint)
    rows = evaluation.run_suite(model, args.suite, seed=args.seed, n_samples=args.n_samples, deterministic=args.greedy_halt)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval-{args.suite}.csv"
    evaluation.write_report(rows, out, out.with_suffix(".samples.jsonl") if args.samples else None)
    writer = csv.writer(sys.stdout)
    writer.writerow(evaluation.REPORT_HEADER)
    for row in rows:
        writer.writerow(row.csv_row())
    log.info("report written to %s", out)
    return 0


def cmd_analyze(args) -> int:
    model, cfg = load_model(args.checkpoint)
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    what = set(args.what)
    if "all" in what:
        what = {"actions", "attention", "pca", "taxonomy", "halting", "training"}
    written = []
    expr = args.expression
    if "actions" in what:
        trace = analysis.dump_action_probs(model, expr)
        analysis.write_action_trace(trace, out / "actions.csv")
        written += [out / "actions.csv", plots.plot_action_trace(trace, out / "actions.svg")]
    if "attention" in what:
        inst = parse_expression(expr)
        batch = make_batch([inst], GridPolicy(0, 2, (0, 0), (0, 0)))
        grid = _grid_before_step(model, batch, args.step)
        amap = analysis.attention_decomposition(model, grid[0], args.head, args.position)
        analysis.write_attention_map(amap, out / "attention.csv")
        written += [out / "attention.csv", plots.plot_attention(amap, out / "attention.svg")]
    if "pca" in what:
        spec = ProblemSpec(tuple(cfg.data.train_terms), tuple(cfg.data.train_digits))
        batch = sample_batch(spec, args.n_samples, GridPolicy(0, 2, (0, 0), (0, 0)), np.random.default_rng(args.seed))
        fit, recs = analysis.pca_tokens(model, batch)
        analysis.write_pca(recs, out / "pca.csv")
        written += [out / "pca.csv", plots.plot_pca(recs, out / "pca.svg")]
        log.info("explained variance ratio %s", np.round(fit.explained_ratio[:4], 4).tolist())
    if "taxonomy" in what:
        rows = analysis.error_taxonomy(model)
        analysis.write_taxonomy(rows, out / "taxonomy.csv")
        written.append(out / "taxonomy.csv")
    if "halting" in what:
        probs = evaluation.halting_problems(range(1, args.max_terms + 1), (1, 10), args.n_samples, args.seed)
        recs = evaluation.halting_stats(model, probs, seed=args.seed)
        evaluation.write_halting_csv(recs, out / "halting.csv")
        written += [out / "halting.csv", plots.plot_halting(recs, out / "halting.svg")]
    if "training" in what:
        metrics = Path(args.checkpoint).parent / "metrics.jsonl"
        if metrics.exists():
            summary = summarize_metrics(read_metrics(metrics))
            curve = [(s["epoch"], s["mean_steps"]) for s in summary]
            written.append(plots.plot_training_steps({cfg.model.variant: curve}, out / "training_steps.svg"))
    for path in written:
        print(path)
    return 0


def _grid_before_step(model, batch, step: int) -> torch.Tensor:
    """Grid fed to the block at application `step` (0 is the Seq2Grid output)."""
    model.eval()
    with torch.no_grad():
        out = model(batch.inputs, batch.grid_dims, sample=True, deterministic=True)
    if step == 0:
        return out.grid0
    grids = out.run.grids
    return grids[min(step, len(grids)) - 1]


def cmd_gradcheck(args) -> int:
    from .gradcheck import report, run_all

    if args.dims != "tiny":
        raise ConfigError("only --dims tiny is supported")
    results = run_all(args.seed)
    print(report(results, args.tol))
    return 0 if all(r.passed(args.tol) for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridadd", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--deterministic", action="store_true", help="single-threaded reference path")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write sampled addition problems")
    g.add_argument("--terms", type=_range, default=(1, 4))
    g.add_argument("--digits", type=_range, default=(1, 10))
    g.add_argument("-n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="standard training schedule")
    t.add_argument("--config")
    t.add_argument("--preset", choices=sorted(PRESETS), default="base")
    t.add_argument("--variant")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--dtype", choices=["float32", "float64"])
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("overtrain", help="continue a run with the lowered regularizer weight")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--epochs", type=int)
    o.add_argument("--out-dir")
    o.set_defaults(func=cmd_overtrain)

    e = sub.add_parser("eval", help="accuracy suites")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--suite", choices=sorted(evaluation.SUITES), default="table3")
    e.add_argument("--n-samples", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--samples", action="store_true", help="also write per-sample JSON lines")
    e.add_argument("--greedy-halt", action="store_true", help="halt when lambda >= 0.5 instead of sampling")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="interpretability exports and figures")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--what", nargs="+", default=["all"],
                   choices=["all", "actions", "attention", "pca", "taxonomy", "halting", "training"])
    a.add_argument("--expression", default="523+102+9416=")
    a.add_argument("--head", type=int, default=0)
    a.add_argument("--position", type=_range, default=(0, 0))
    a.add_argument("--step", type=int, default=0)
    a.add_argument("--n-samples", type=int, default=64)
    a.add_argument("--max-terms", type=int, default=8)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out-dir")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--dims", default="tiny")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    set_deterministic(args.deterministic)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"gridadd: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
