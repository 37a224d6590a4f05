"""Synthetic verifiable tasks, the binary verifier and a scripted teacher.

Two task kinds:

* ``reverse_sequence``: the query is a digit string, the answer its reversal.
* ``modular_chain``: the query is ``a1 + a2 + ... mod m``, the answer the residue.

The teacher writes worked solutions in its own vocabulary. That vocabulary
shares the digits, operators and delimiters with the learner but adds
derivation tokens (``swap``, ``p0``.. ``p9``, ``sum``, ``carry``) the learner
has never seen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .policy import Trajectory
from .vocab import (
    COT_CLOSE,
    COT_OPEN,
    EOS,
    RESP_CLOSE,
    RESP_OPEN,
    MappingMode,
    TokenMapping,
    Vocabulary,
    build_vocab,
    strip_meta_tokens,
)

DIGITS = tuple(str(i) for i in range(10))
# Surface forms the teacher may use for each derivation word; the first is the
# canonical one. None of them exist in the learner vocabulary.
TEACHER_SYNONYMS = {
    "swap": ("swap", "exchange", "flip", "trade"),
    "sum": ("sum", "total", "acc", "subtotal"),
    "carry": ("carry", "wrap", "reduce", "fold"),
}
POSITION_FORMS = ("p{}", "@{}", "pos{}", "#{}")
TEACHER_ONLY = (
    *(form for forms in TEACHER_SYNONYMS.values() for form in forms),
    *(f.format(i) for f in POSITION_FORMS for i in range(10)),
)


class TaskKind(str, Enum):
    REVERSE_SEQUENCE = "reverse_sequence"
    MODULAR_CHAIN = "modular_chain"


# Difficulty presets. The hard reverse length keeps a freshly initialised
# policy well under 5% success (chance is about 17**-4).
PRESET_LENGTHS = {
    (TaskKind.REVERSE_SEQUENCE, "easy"): (1, 2),
    (TaskKind.REVERSE_SEQUENCE, "hard"): (3, 3),
    (TaskKind.MODULAR_CHAIN, "easy"): (2, 2),
    (TaskKind.MODULAR_CHAIN, "hard"): (4, 5),
}


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = TaskKind.REVERSE_SEQUENCE
    difficulty: str = "hard"
    length_range: tuple[int, int] | None = None
    modulus: int = 7
    teacher_styles: int = 4  # surface forms the teacher draws from; 1 = canonical only

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.difficulty not in ("easy", "hard"):
            raise ValueError(f"difficulty must be easy or hard, got {self.difficulty!r}")
        if self.length_range is None:
            object.__setattr__(self, "length_range", PRESET_LENGTHS[(self.kind, self.difficulty)])
        lo, hi = self.length_range
        object.__setattr__(self, "length_range", (int(lo), int(hi)))
        if not 1 <= lo <= hi:
            raise ValueError(f"bad length range {self.length_range}")
        if self.kind is TaskKind.REVERSE_SEQUENCE and hi > 10:
            raise ValueError("reverse_sequence supports at most 10 positions")
        if self.kind is TaskKind.MODULAR_CHAIN and not 2 <= self.modulus <= 10:
            raise ValueError("modulus must lie in [2, 10]")
        if not 1 <= self.teacher_styles <= len(POSITION_FORMS):
            raise ValueError(f"teacher_styles must lie in [1, {len(POSITION_FORMS)}]")


def learner_vocab(kind: TaskKind | str) -> Vocabulary:
    if TaskKind(kind) is TaskKind.REVERSE_SEQUENCE:
        return build_vocab(DIGITS)
    return build_vocab(DIGITS + ("+", "mod"))


def teacher_vocab(kind: TaskKind | str) -> Vocabulary:
    return build_vocab(learner_vocab(kind).tokens[7:] + TEACHER_ONLY)


@dataclass(frozen=True)
class ExpertTrace:
    teacher_tokens: tuple[int, ...]
    answer: tuple[int, ...]


@dataclass(frozen=True)
class Task:
    query: tuple[int, ...]
    ground_truth: tuple[int, ...]
    trace: ExpertTrace


@dataclass(frozen=True)
class TaskEnv:
    """Vocabularies and mappings for one task kind."""

    spec: TaskSpec
    learner: Vocabulary = field(init=False)
    teacher: Vocabulary = field(init=False)
    projection: TokenMapping = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "learner", learner_vocab(self.spec.kind))
        object.__setattr__(self, "teacher", teacher_vocab(self.spec.kind))
        object.__setattr__(
            self, "projection", TokenMapping.build(self.teacher, self.learner, MappingMode.EXACT_OR_UNK)
        )

    def mapping(self, mode: MappingMode | str) -> TokenMapping:
        return TokenMapping.build(self.teacher, self.learner, mode)

    def sample(self, rng: np.random.Generator) -> Task:
        query, truth = generate_query(self.spec, rng, self.learner)
        return Task(query, truth, expert_trace(self.spec, query, truth, self.learner, self.teacher, rng))


def _digits(n: int) -> list[str]:
    return list(str(n))


def generate_query(
    spec: TaskSpec, rng: np.random.Generator, vocab: Vocabulary | None = None
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    vocab = vocab or learner_vocab(spec.kind)
    lo, hi = spec.length_range
    n = int(rng.integers(lo, hi + 1))
    if spec.kind is TaskKind.REVERSE_SEQUENCE:
        syms = [DIGITS[int(d)] for d in rng.integers(0, 10, n)]
        return tuple(vocab.encode(syms)), tuple(vocab.encode(syms[::-1]))
    operands = [int(a) for a in rng.integers(0, spec.modulus, n)]
    return modular_chain_query(operands, spec.modulus, vocab)


def modular_chain_query(
    operands: Sequence[int], modulus: int, vocab: Vocabulary | None = None
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    vocab = vocab or learner_vocab(TaskKind.MODULAR_CHAIN)
    syms: list[str] = []
    for i, a in enumerate(operands):
        if i:
            syms.append("+")
        syms += _digits(a)
    syms += ["mod", *_digits(modulus)]
    return tuple(vocab.encode(syms)), tuple(vocab.encode(_digits(sum(operands) % modulus)))


def parse_modular_chain(query: Sequence[int], vocab: Vocabulary) -> tuple[list[int], int]:
    syms = vocab.decode(query)
    k = syms.index("mod")
    operands = [int("".join(g)) for g in _split(syms[:k], "+")]
    return operands, int("".join(syms[k + 1 :]))


def _split(syms: list[str], sep: str) -> Iterable[list[str]]:
    group: list[str] = []
    for s in syms:
        if s == sep:
            yield group
            group = []
        else:
            group.append(s)
    yield group


def expert_trace(
    spec: TaskSpec,
    query: Sequence[int],
    ground_truth: Sequence[int],
    learner: Vocabulary | None = None,
    teacher: Vocabulary | None = None,
    rng: np.random.Generator | None = None,
) -> ExpertTrace:
    """Scripted worked solution ending in a ``<response>`` answer segment.

    reverse_sequence narrates the outside-in swaps as ``swap p<i> p<j> q_i q_j``;
    modular_chain narrates running sums as ``sum <s> carry <s mod m>``.
    Without ``rng`` the canonical wording is used; with it, each derivation
    word is drawn from the first ``spec.teacher_styles`` surface forms.
    """
    learner = learner or learner_vocab(spec.kind)
    teacher = teacher or teacher_vocab(spec.kind)

    def word(name: str) -> str:
        if rng is None or spec.teacher_styles == 1:
            return TEACHER_SYNONYMS[name][0]
        return TEACHER_SYNONYMS[name][int(rng.integers(spec.teacher_styles))]

    def position(i: int) -> str:
        if rng is None or spec.teacher_styles == 1:
            return POSITION_FORMS[0].format(i)
        return POSITION_FORMS[int(rng.integers(spec.teacher_styles))].format(i)

    q = learner.decode(query)
    steps: list[str] = []
    if spec.kind is TaskKind.REVERSE_SEQUENCE:
        n = len(q)
        for i in range(n // 2):
            j = n - 1 - i
            steps += [word("swap"), position(i), position(j), q[i], q[j]]
    else:
        operands, modulus = parse_modular_chain(query, learner)
        running = operands[0]
        for a in operands[1:]:
            total = running + a
            running = total % modulus
            steps += [word("sum"), *_digits(total), word("carry"), *_digits(running)]
    answer = learner.decode(ground_truth)
    tokens = teacher.encode(steps + ["<response>", *answer, "</response>"])
    return ExpertTrace(tuple(tokens), tuple(ground_truth))


def trace_answer(trace: ExpertTrace, teacher: Vocabulary, learner: Vocabulary) -> tuple[int, ...]:
    """Decode the answer from the trace's own response segment."""
    syms = teacher.decode(trace.teacher_tokens)
    start = syms.index("<response>") + 1
    end = syms.index("</response>", start)
    return tuple(learner.encode(syms[start:end]))


def answer_content(tokens: Sequence[int]) -> list[int]:
    """Tokens the verifier compares.

    Everything from the first EOS on is ignored. If a ``<response>`` opener is
    present, only the segment up to the next ``</response>`` (or the end)
    counts; otherwise the whole sequence does. Meta tokens are then stripped.
    """
    seq = list(tokens)
    if EOS in seq:
        seq = seq[: seq.index(EOS)]
    if RESP_OPEN in seq:
        seq = seq[seq.index(RESP_OPEN) + 1 :]
        if RESP_CLOSE in seq:
            seq = seq[: seq.index(RESP_CLOSE)]
    return strip_meta_tokens(seq)


def verify(traj: Trajectory | Sequence[int], ground_truth: Sequence[int]) -> float:
    tokens = traj.tokens if isinstance(traj, Trajectory) else traj
    return 1.0 if answer_content(tokens) == list(ground_truth) else 0.0


def build_rephrase_context(
    query: Sequence[int], trace: ExpertTrace, vocab: Vocabulary, mapping: TokenMapping
) -> list[int]:
    """``[BOS] query <cot> projected-trace </cot>`` in learner tokens.

    ``mapping`` must be the exact-or-unk projection: shared symbols survive and
    derivation-only tokens become UNK.
    """
    if mapping.mode is not MappingMode.EXACT_OR_UNK:
        raise ValueError("rephrase contexts use the exact-or-unk projection")
    projected = [mapping.pairs[t] for t in trace.teacher_tokens]
    return [vocab.lookup("<bos>"), *query, COT_OPEN, *projected, COT_CLOSE]


# ---------------------------------------------------------------- task files


def save_tasks(tasks: Iterable[Task], env: TaskEnv, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            record = {
                "kind": env.spec.kind.value,
                "query": env.learner.decode(task.query),
                "ground_truth": env.learner.decode(task.ground_truth),
                "expert_trace": env.teacher.decode(task.trace.teacher_tokens),
            }
            fh.write(json.dumps(record) + "\n")


def load_tasks(path: str | Path, env: TaskEnv) -> list[Task]:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["kind"] != env.spec.kind.value:
                raise ValueError(f"{path}:{lineno}: task kind {rec['kind']!r} != {env.spec.kind.value!r}")
            truth = tuple(env.learner.encode(rec["ground_truth"]))
            trace = ExpertTrace(tuple(env.teacher.encode(rec["expert_trace"])), truth)
            tasks.append(Task(tuple(env.learner.encode(rec["query"])), truth, trace))
    return tasks
