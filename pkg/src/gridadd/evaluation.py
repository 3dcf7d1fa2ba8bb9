"""Character/sequence accuracy with pad-pad exclusion, extrapolation suites and halting statistics."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .datagen import PAD, GridPolicy, ProblemInstance, ProblemSpec, encode, grid_dims, render_tokens, sample_problem, target_row, to_text

REPORT_HEADER = ["suite", "terms_range", "digits_range", "char_acc", "seq_acc", "mean_steps", "n_samples"]
HALTING_HEADER = ["terms", "seed", "mean_steps", "std_steps", "char_acc", "seq_acc", "n_samples"]


@dataclass
class MatchTally:
    correct: int = 0
    valid: int = 0
    seq_flags: list[bool] = field(default_factory=list)

    @property
    def char_accuracy(self) -> float:
        return self.correct / self.valid if self.valid else 1.0

    @property
    def seq_accuracy(self) -> float:
        return sum(self.seq_flags) / len(self.seq_flags) if self.seq_flags else 1.0

    def __add__(self, other: "MatchTally") -> "MatchTally":
        return MatchTally(self.correct + other.correct, self.valid + other.valid, self.seq_flags + other.seq_flags)


def char_seq_accuracy(pred: Sequence[int], target: Sequence[int]) -> MatchTally:
    """Tally one aligned pair. Pad-pad cells are ignored; every other cell is a valid match,
    correct only when the symbols agree."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} are not aligned")
    valid = ~((pred == PAD) & (target == PAD))
    correct = valid & (pred == target)
    return MatchTally(int(correct.sum()), int(valid.sum()), [bool(correct.sum() == valid.sum())])


def batch_char_accuracy(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample character accuracy over valid matches, shape (B,)."""
    valid = ~((pred == PAD) & (target == PAD))
    correct = valid & (pred == target)
    return correct.sum(-1).double() / valid.sum(-1).clamp(min=1).double()


def format_score(x: float) -> str:
    """Two decimals, except that anything short of a perfect 1.0 never prints as 1.0."""
    if x >= 1.0:
        return "1.0"
    return f"{min(round(x, 2), 0.99):.2f}"


@dataclass(frozen=True)
class SuiteEntry:
    name: str
    spec: ProblemSpec
    n_samples: int = 1000


def _entry(name: str, terms: tuple[int, int], digits: tuple[int, int], n: int = 1000) -> SuiteEntry:
    return SuiteEntry(name, ProblemSpec(terms, digits), n)


SUITES: dict[str, list[SuiteEntry]] = {
    "table3": [
        _entry("2x15", (2, 2), (15, 15)),
        _entry("2x100", (2, 2), (100, 100)),
        _entry("2x602", (2, 2), (602, 602)),
        _entry("in_dist", (1, 4), (1, 10)),
        _entry("act", (1, 5), (1, 5)),
        _entry("terms_5_6", (5, 6), (1, 10)),
        _entry("terms_7_10", (7, 10), (1, 10)),
    ],
    "table4_digits": [
        _entry("d1_1000", (2, 2), (1, 1000)),
        _entry("d1000", (2, 2), (1000, 1000)),
        _entry("d1_2000", (2, 2), (1, 2000)),
        _entry("d2000", (2, 2), (2000, 2000)),
        _entry("d1_4000", (2, 2), (1, 4000)),
        _entry("d4000", (2, 2), (4000, 4000)),
    ],
    "table4_terms": [_entry(f"t{n}", (n, n), (5, 5)) for n in range(5, 11)],
    "smoke": [
        _entry("in_dist", (1, 2), (1, 5)),
        _entry("digits_6_8", (2, 2), (6, 8)),
        _entry("terms_3", (3, 3), (1, 5)),
    ],
}


def validate_suite(entries: Sequence[SuiteEntry]) -> None:
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate suite entry names in {names}")


@dataclass
class SampleResult:
    expression: str
    target: str
    prediction: str
    correct: int
    valid: int
    seq_correct: bool
    steps: int
    overflow: bool = False

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def evaluate_instances(
    model,
    instances: Sequence[ProblemInstance],
    batch_size: int = 64,
    generator: torch.Generator | None = None,
    deterministic: bool = False,
    policy: GridPolicy | None = None,
) -> list[SampleResult]:
    """Evaluation-mode predictions, batched by similar size so grids stay small."""
    policy = policy or GridPolicy()
    order = sorted(range(len(instances)), key=lambda i: (len(instances[i].terms), instances[i].max_digits))
    results: list[SampleResult | None] = [None] * len(instances)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        chunk = [instances[i] for i in idx]
        texts = [render_tokens(inst) for inst in chunk]
        length = max(len(t) for t in texts)
        tokens = np.stack([encode(t, length) for t in texts])
        h, w = grid_dims(max(len(c.terms) for c in chunk), max(c.max_digits for c in chunk), policy)
        preds, steps = model.predict(tokens, (h, w), generator=generator, deterministic=deterministic)
        preds = preds.cpu().numpy()
        for k, (i, inst) in enumerate(zip(idx, chunk)):
            if len(inst.result) > w:
                results[i] = SampleResult(texts[k], inst.result, to_text(preds[k]), 0, len(inst.result), False, int(steps[k]), True)
                continue
            tally = char_seq_accuracy(preds[k], target_row(inst.result, w))
            results[i] = SampleResult(
                texts[k], inst.result, to_text(preds[k]), tally.correct, tally.valid, tally.seq_flags[0], int(steps[k])
            )
    return results  # type: ignore[return-value]


def aggregate(results: Iterable[SampleResult]) -> dict[str, float]:
    results = list(results)
    tally = sum((MatchTally(r.correct, r.valid, [r.seq_correct]) for r in results), MatchTally())
    steps = [r.steps for r in results]
    return {
        "char_acc": tally.char_accuracy,
        "seq_acc": tally.seq_accuracy,
        "mean_steps": float(np.mean(steps)) if steps else 0.0,
        "std_steps": float(np.std(steps)) if steps else 0.0,
        "n_samples": len(results),
    }


@dataclass
class SuiteRow:
    suite: str
    entry: SuiteEntry
    char_acc: float
    seq_acc: float
    mean_steps: float
    n_samples: int
    samples: list[SampleResult] = field(default_factory=list, repr=False)

    def csv_row(self) -> list[str]:
        s = self.entry.spec
        return [
            f"{self.suite}/{self.entry.name}",
            f"[{s.n_terms[0]},{s.n_terms[1]}]",
            f"[{s.n_digits[0]},{s.n_digits[1]}]",
            format_score(self.char_acc),
            format_score(self.seq_acc),
            f"{self.mean_steps:.2f}",
            str(self.n_samples),
        ]


def run_suite(
    model,
    suite: str | Sequence[SuiteEntry],
    seed: int = 0,
    n_samples: int | None = None,
    batch_size: int = 64,
    deterministic: bool = False,
) -> list[SuiteRow]:
    name = suite if isinstance(suite, str) else "custom"
    entries = SUITES[suite] if isinstance(suite, str) else list(suite)
    validate_suite(entries)
    rows = []
    for k, entry in enumerate(entries):
        rng = np.random.default_rng([seed, k])
        gen = torch.Generator().manual_seed(seed * 1000 + k)
        n = n_samples or entry.n_samples
        instances = [sample_problem(entry.spec, rng) for _ in range(n)]
        samples = evaluate_instances(model, instances, batch_size, gen, deterministic)
        agg = aggregate(samples)
        rows.append(SuiteRow(name, entry, agg["char_acc"], agg["seq_acc"], agg["mean_steps"], n, samples))
    return rows


def write_report(rows: Sequence[SuiteRow], path: str | Path, samples_path: str | Path | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for row in rows:
            writer.writerow(row.csv_row())
    if samples_path is not None:
        with open(samples_path, "w", encoding="utf-8") as fh:
            for row in rows:
                for s in row.samples:
                    fh.write(json.dumps({"entry": row.entry.name, **s.__dict__}) + "\n")


@dataclass
class HaltingRecord:
    terms: int
    seed: int
    mean_steps: float
    std_steps: float
    char_acc: float
    seq_acc: float
    n_samples: int

    def csv_row(self) -> list[str]:
        return [
            str(self.terms), str(self.seed), f"{self.mean_steps:.4f}", f"{self.std_steps:.4f}",
            f"{self.char_acc:.4f}", f"{self.seq_acc:.4f}", str(self.n_samples),
        ]


def halting_stats(
    model,
    problems: dict[int, Sequence[ProblemInstance]],
    seed: int = 0,
    deterministic: bool = False,
) -> list[HaltingRecord]:
    """Mean/stdev of halting steps and accuracy for each term count."""
    gen = torch.Generator().manual_seed(seed)
    records = []
    for terms in sorted(problems):
        samples = evaluate_instances(model, problems[terms], generator=gen, deterministic=deterministic)
        steps = [s.steps for s in samples]
        agg = aggregate(samples)
        std = statistics.pstdev(steps) if steps else 0.0
        records.append(HaltingRecord(terms, seed, agg["mean_steps"], std, agg["char_acc"], agg["seq_acc"], len(samples)))
    return records


def halting_problems(terms: Iterable[int], digits: tuple[int, int], n: int, seed: int = 0) -> dict[int, list[ProblemInstance]]:
    out = {}
    for t in terms:
        rng = np.random.default_rng([seed, t])
        spec = ProblemSpec((t, t), digits)
        out[t] = [sample_problem(spec, rng) for _ in range(n)]
    return out


def write_halting_csv(records: Sequence[HaltingRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HALTING_HEADER)
        for r in records:
            writer.writerow(r.csv_row())
