"""Synthetic modular-arithmetic reasoning tasks.

A problem is a left-to-right chain such as ``3 + 4 * 2 mod 7 <q>``. The
canonical worked solution writes one step per segment::

    + 4 0 | * 2 0 => 0 <eos>

where each segment restates the operator and operand and then the running
value modulo the modulus. Ground truth is kept on the instance for
evaluation only; nothing in the adaptation loop reads it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PROMPT_END = "<q>"
STEP_SEP = "|"
ANSWER_DELIM = "=>"
EOS = "<eos>"
MOD = "mod"
OPS = ("+", "-", "*")

Tokens = tuple[str, ...]


class PromptParseError(ValueError):
    """Raised when a prompt is not a well-formed arithmetic chain."""


class _Unparseable:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNPARSEABLE"

    def __reduce__(self):
        return (_Unparseable, ())


#: Answer value for completions with no extractable final answer.
UNPARSEABLE = _Unparseable()


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    prompt_end: str = PROMPT_END
    step_sep: str = STEP_SEP
    answer_delim: str = ANSWER_DELIM
    eos: str = EOS
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        for marker in (self.prompt_end, self.step_sep, self.answer_delim, self.eos):
            if marker not in self.tokens:
                raise ValueError(f"special marker {marker!r} missing from vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def for_modulus(cls, max_modulus: int) -> "Vocabulary":
        """Numbers ``0..max_modulus``, the operators, ``mod`` and the markers."""
        if max_modulus < 2:
            raise ValueError("max_modulus must be >= 2")
        numbers = tuple(str(i) for i in range(max_modulus + 1))
        return cls(numbers + OPS + (MOD, PROMPT_END, STEP_SEP, ANSWER_DELIM, EOS))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def encode(self, seq: Iterable[str]) -> np.ndarray:
        return np.array([self.index(t) for t in seq], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> Tokens:
        return tuple(self.tokens[int(i)] for i in ids)

    @property
    def eos_id(self) -> int:
        return self._index[self.eos]

    @property
    def number_ids(self) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tokens) if t.isdigit()], dtype=np.int64)


@dataclass(frozen=True)
class ProblemInstance:
    id: str
    prompt: Tokens
    ground_truth: Tokens
    depth: int
    modulus: int

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "prompt_tokens": list(self.prompt),
            "ground_truth_tokens": list(self.ground_truth),
            "depth": self.depth,
            "modulus": self.modulus,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ProblemInstance":
        return cls(
            id=str(rec["id"]),
            prompt=tuple(rec["prompt_tokens"]),
            ground_truth=tuple(rec["ground_truth_tokens"]),
            depth=int(rec["depth"]),
            modulus=int(rec["modulus"]),
        )


@dataclass(frozen=True)
class Completion:
    trace: Tokens
    answer: Tokens | _Unparseable
    raw: Tokens

    @classmethod
    def from_raw(cls, raw: Sequence[str], vocab: Vocabulary) -> "Completion":
        raw = tuple(raw)
        return cls(trace=split_trace(raw, vocab), answer=parse_answer(raw, vocab), raw=raw)

    @property
    def parseable(self) -> bool:
        return self.answer is not UNPARSEABLE


def _as_tokens(prompt) -> Tokens:
    if isinstance(prompt, str):
        return tuple(prompt.split())
    return tuple(prompt)


def parse_prompt(prompt) -> tuple[int, list[tuple[str, int]], int]:
    """Split a prompt into ``(first operand, [(op, operand), ...], modulus)``."""
    toks = list(_as_tokens(prompt))
    if toks and toks[-1] == PROMPT_END:
        toks.pop()
    if len(toks) < 3 or toks[-2] != MOD:
        raise PromptParseError(f"prompt must end with 'mod <m>': {' '.join(toks)!r}")
    body, mod_tok = toks[:-2], toks[-1]
    if not mod_tok.isdigit() or int(mod_tok) < 2:
        raise PromptParseError(f"bad modulus {mod_tok!r}")
    if len(body) % 2 == 0:
        raise PromptParseError("expression must alternate operand/operator")
    for i, tok in enumerate(body):
        if i % 2 == 0 and not tok.isdigit():
            raise PromptParseError(f"non-numeric operand {tok!r} at position {i}")
        if i % 2 == 1 and tok not in OPS:
            raise PromptParseError(f"unknown operator {tok!r} at position {i}")
    steps = [(body[i], int(body[i + 1])) for i in range(1, len(body), 2)]
    return int(body[0]), steps, int(mod_tok)


def _apply(acc: int, op: str, b: int, m: int) -> int:
    if op == "+":
        return (acc + b) % m
    if op == "-":
        return (acc - b) % m
    return (acc * b) % m


def running_values(prompt) -> list[int]:
    """Intermediate results after each step, reduced modulo the modulus."""
    acc, steps, m = parse_prompt(prompt)
    out = []
    for op, b in steps:
        acc = _apply(acc, op, b, m)
        out.append(acc)
    return out


def oracle_solve(prompt) -> Tokens:
    acc, steps, m = parse_prompt(prompt)
    vals = running_values(prompt)
    return (str(vals[-1] if vals else acc % m),)


def oracle_trace(prompt) -> Tokens:
    """Canonical correct generation (trace, delimiter, answer, EOS)."""
    _, steps, _ = parse_prompt(prompt)
    vals = running_values(prompt)
    out: list[str] = []
    for k, ((op, b), r) in enumerate(zip(steps, vals)):
        if k:
            out.append(STEP_SEP)
        out += [op, str(b), str(r)]
    return tuple(out) + (ANSWER_DELIM,) + oracle_solve(prompt) + (EOS,)


def parse_answer(raw: Sequence[str], vocab: Vocabulary) -> Tokens | _Unparseable:
    raw = list(raw)
    delims = [i for i, t in enumerate(raw) if t == vocab.answer_delim]
    if not delims:
        return UNPARSEABLE
    start = delims[-1] + 1
    try:
        end = raw.index(vocab.eos, start)
    except ValueError:
        return UNPARSEABLE
    span = tuple(raw[start:end])
    return span if span else UNPARSEABLE


def split_trace(raw: Sequence[str], vocab: Vocabulary) -> Tokens:
    """Reasoning tokens of a generation: everything before the last delimiter.

    Without a delimiter the trace runs up to the first EOS (or the end when
    truncated). The trace is always a prefix of ``raw``.
    """
    raw = tuple(raw)
    delims = [i for i, t in enumerate(raw) if t == vocab.answer_delim]
    if delims:
        return raw[: delims[-1]]
    if vocab.eos in raw:
        return raw[: raw.index(vocab.eos)]
    return raw


def gen_dataset(seed: int, count: int, depth_range: tuple[int, int], modulus: int) -> list[ProblemInstance]:
    lo, hi = depth_range
    if count < 1:
        raise ValueError("count must be >= 1")
    if lo < 1 or hi < 1:
        raise ValueError("depth bounds must be >= 1")
    if lo > hi:
        raise ValueError(f"invalid depth interval [{lo}, {hi}]")
    if modulus < 2:
        raise ValueError("modulus must be >= 2")
    rng = np.random.default_rng(seed)
    problems = []
    for i in range(count):
        depth = int(rng.integers(lo, hi + 1))
        operands = rng.integers(0, modulus, size=depth + 1)
        ops = rng.integers(0, len(OPS), size=depth)
        prompt = [str(operands[0])]
        for op, b in zip(ops, operands[1:]):
            prompt += [OPS[op], str(b)]
        prompt += [MOD, str(modulus), PROMPT_END]
        prompt = tuple(prompt)
        problems.append(
            ProblemInstance(
                id=f"p{i:05d}",
                prompt=prompt,
                ground_truth=oracle_solve(prompt),
                depth=depth,
                modulus=modulus,
            )
        )
    return problems


def save_dataset(problems: Iterable[ProblemInstance], path) -> None:
    with open(path, "w") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_record()) + "\n")


def load_dataset(path) -> list[ProblemInstance]:
    lines = Path(path).read_text().splitlines()
    return [ProblemInstance.from_record(json.loads(line)) for line in lines if line.strip()]
