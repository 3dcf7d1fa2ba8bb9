"""Addition problem generation, tokenization and batching.

Problems are sampled digit-by-digit: the term count is uniform in its range,
each term's digit count is uniform in its range, and every digit is uniform
in 0-9 (so leading zeros may appear in terms).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD = 0
PLUS = 11
EQUALS = 12
VOCAB_SIZE = 13
SYMBOLS = ("<PAD>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "=")

_CHAR_TO_CODE = {s: i for i, s in enumerate(SYMBOLS) if i != PAD}


@dataclass(frozen=True)
class ProblemSpec:
    """Family of additions with term count in `n_terms` and per-term digits in `n_digits`."""

    n_terms: tuple[int, int]
    n_digits: tuple[int, int]

    def __post_init__(self) -> None:
        n1, n2 = self.n_terms
        d1, d2 = self.n_digits
        if not (1 <= n1 <= n2):
            raise ValueError(f"invalid term range {self.n_terms}")
        if not (1 <= d1 <= d2):
            raise ValueError(f"invalid digit range {self.n_digits}")

    def __str__(self) -> str:
        return f"P([{self.n_terms[0]},{self.n_terms[1]}],[{self.n_digits[0]},{self.n_digits[1]}])"


@dataclass(frozen=True)
class ProblemInstance:
    terms: tuple[str, ...]
    result: str

    @property
    def expression(self) -> str:
        return render_tokens(self)

    @property
    def max_digits(self) -> int:
        return max(len(t) for t in self.terms)


@dataclass
class GridPolicy:
    """Grid sizing: H = N + f_h + R_h, W = D + f_w + R_w with R uniform in the given ranges."""

    f_h: int = 0
    f_w: int = 2
    r_h: tuple[int, int] = (0, 3)
    r_w: tuple[int, int] = (0, 3)


@dataclass
class Batch:
    inputs: np.ndarray  # (B, S) int64 symbol codes, PAD-suffixed
    targets: list[str]
    grid_dims: tuple[int, int]
    group_id: int | None = None
    instances: list[ProblemInstance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.targets)

    def target_rows(self) -> np.ndarray:
        """Right-aligned target symbols for every sample, shape (B, W)."""
        width = self.grid_dims[1]
        return np.stack([target_row(t, width) for t in self.targets])


def add_decimal_strings(terms: Iterable[str]) -> str:
    """Column addition of decimal digit strings, without leading zeros in the result."""
    terms = list(terms)
    width = max((len(t) for t in terms), default=0)
    if width == 0:
        return "0"
    cols = np.zeros(width, dtype=np.int64)
    for t in terms:
        digits = np.frombuffer(t.encode("ascii"), dtype=np.uint8).astype(np.int64) - 48
        if digits.size and (digits.min() < 0 or digits.max() > 9):
            raise ValueError(f"not a digit string: {t!r}")
        cols[width - len(t):] += digits
    out = []
    carry = 0
    for c in cols[::-1]:
        carry, d = divmod(int(c) + carry, 10)
        out.append(d)
    while carry:
        carry, d = divmod(carry, 10)
        out.append(d)
    text = "".join(str(d) for d in reversed(out)).lstrip("0")
    return text or "0"


def make_instance(terms: Sequence[str]) -> ProblemInstance:
    terms = tuple(terms)
    if not terms:
        raise ValueError("an addition needs at least one term")
    return ProblemInstance(terms, add_decimal_strings(terms))


def sample_problem(spec: ProblemSpec, rng: np.random.Generator) -> ProblemInstance:
    n = int(rng.integers(spec.n_terms[0], spec.n_terms[1] + 1))
    lengths = rng.integers(spec.n_digits[0], spec.n_digits[1] + 1, size=n)
    terms = []
    for d in lengths:
        digits = rng.integers(0, 10, size=int(d))
        terms.append("".join(map(str, digits)))
    return make_instance(terms)


def render_tokens(instance: ProblemInstance) -> str:
    return "+".join(instance.terms) + "="


def parse_expression(expression: str) -> ProblemInstance:
    """Inverse of `render_tokens`; the trailing '=' is optional."""
    body = expression.strip().rstrip("=")
    terms = body.split("+")
    if not all(t.isdigit() for t in terms):
        raise ValueError(f"malformed expression: {expression!r}")
    return make_instance(terms)


def encode(text: str, length: int | None = None) -> np.ndarray:
    """Symbol codes for `text`, PAD-suffixed up to `length`."""
    try:
        codes = [_CHAR_TO_CODE[c] for c in text]
    except KeyError as exc:
        raise ValueError(f"symbol {exc.args[0]!r} not in the addition alphabet") from None
    if length is not None:
        if len(codes) > length:
            raise ValueError(f"sequence of length {len(codes)} does not fit in {length}")
        codes += [PAD] * (length - len(codes))
    return np.asarray(codes, dtype=np.int64)


def to_text(codes: Iterable[int], pad: str = "") -> str:
    return "".join(pad if c == PAD else SYMBOLS[c] for c in map(int, codes))


def target_row(result: str, width: int) -> np.ndarray:
    """Result digits right-aligned in a row of `width` cells, PAD elsewhere."""
    if len(result) > width:
        raise ValueError(f"result of {len(result)} digits does not fit a grid of width {width}")
    row = np.full(width, PAD, dtype=np.int64)
    row[width - len(result):] = encode(result)
    return row


def grid_dims(
    batch_max_terms: int,
    batch_max_digits: int,
    policy: GridPolicy,
    rng: np.random.Generator | None = None,
) -> tuple[int, int]:
    """Grid height/width for a batch. Without an rng the random oversizes are 0 (evaluation)."""
    r_h = r_w = 0
    if rng is not None:
        r_h = int(rng.integers(policy.r_h[0], policy.r_h[1] + 1))
        r_w = int(rng.integers(policy.r_w[0], policy.r_w[1] + 1))
    return (batch_max_terms + policy.f_h + r_h, batch_max_digits + policy.f_w + r_w)


def make_batch(
    instances: Sequence[ProblemInstance],
    policy: GridPolicy,
    rng: np.random.Generator | None = None,
    group: tuple[int, int] | None = None,
    group_id: int | None = None,
) -> Batch:
    if not instances:
        raise ValueError("cannot build a batch from no instances")
    if group is not None:
        stray = [i for i in instances if not group[0] <= len(i.terms) <= group[1]]
        if stray:
            raise ValueError(
                f"{len(stray)} instance(s) fall outside term group {group}, "
                f"e.g. {render_tokens(stray[0])!r}"
            )
    texts = [render_tokens(i) for i in instances]
    length = max(len(t) for t in texts)
    inputs = np.stack([encode(t, length) for t in texts])
    dims = grid_dims(
        max(len(i.terms) for i in instances), max(i.max_digits for i in instances), policy, rng
    )
    return Batch(inputs, [i.result for i in instances], dims, group_id, list(instances))


def sample_batch(
    spec: ProblemSpec,
    size: int,
    policy: GridPolicy,
    rng: np.random.Generator,
    train: bool = True,
    group_id: int | None = None,
) -> Batch:
    instances = [sample_problem(spec, rng) for _ in range(size)]
    return make_batch(instances, policy, rng if train else None, spec.n_terms, group_id)


def batch_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one (epoch, step, group, ...) coordinate of a seeded run."""
    return np.random.default_rng([seed, *keys])


def write_dataset(path: str | Path, instances: Iterable[ProblemInstance]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(f"{render_tokens(inst)}\t{inst.result}\n")
            n += 1
    return n


def read_dataset(path: str | Path) -> list[ProblemInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            expr, _, result = line.partition("\t")
            inst = parse_expression(expr)
            if result and result != inst.result:
                raise ValueError(f"{path}:{lineno}: stored result {result} != {inst.result}")
            out.append(inst)
    return out
