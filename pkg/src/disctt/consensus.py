"""Majority voting, agreement ratios and easy/hard routing."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .policy import SampleGroup
from .tasks import UNPARSEABLE, Completion


class ConsensusError(RuntimeError):
    pass


def _sort_key(answer):
    # parseable answers in token order first, the unparseable class last
    if answer is UNPARSEABLE:
        return (1, ())
    return (0, tuple(answer))


def majority_answer(answers: Sequence) -> tuple[object, int]:
    """Most frequent answer and its count.

    Ties go to the smallest answer in canonical token order; the
    unparseable class only wins when strictly more frequent than every
    parseable answer.
    """
    if not answers:
        raise ValueError("answers must be non-empty")
    hist = Counter(answers)
    best = max(hist.values())
    winner = min((a for a, n in hist.items() if n == best), key=_sort_key)
    return winner, best


def agreement_ratio(answers: Sequence) -> float:
    _, count = majority_answer(answers)
    return count / len(answers)


def render_answer(answer) -> str | None:
    return None if answer is UNPARSEABLE else " ".join(answer)


@dataclass(frozen=True)
class ConsensusReport:
    prompt_id: str
    histogram: dict
    a_maj: object
    majority_count: int
    c: float
    m: int

    @classmethod
    def from_answers(cls, prompt_id: str, answers: Sequence) -> "ConsensusReport":
        a_maj, count = majority_answer(answers)
        return cls(
            prompt_id=prompt_id,
            histogram=dict(Counter(answers)),
            a_maj=a_maj,
            majority_count=count,
            c=count / len(answers),
            m=len(answers),
        )

    @classmethod
    def from_group(cls, group: SampleGroup) -> "ConsensusReport":
        return cls.from_answers(group.prompt_id, group.answers)

    def majority_indices(self, answers: Sequence) -> list[int]:
        """Indices whose answer equals the (parseable) majority answer."""
        if self.a_maj is UNPARSEABLE:
            return []
        return [i for i, a in enumerate(answers) if a == self.a_maj]


@dataclass(frozen=True)
class Partition:
    easy: tuple[str, ...]
    hard: tuple[str, ...]
    rho: float
    created_at_step: int

    def route_of(self, prompt_id: str) -> str:
        if prompt_id in self.easy:
            return "easy"
        if prompt_id in self.hard:
            return "hard"
        raise KeyError(prompt_id)

    @property
    def easy_fraction(self) -> float:
        total = len(self.easy) + len(self.hard)
        return len(self.easy) / total if total else 0.0


def partition(reports: Sequence[ConsensusReport], rho: float, step: int) -> Partition:
    if not 0 < rho < 1:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    ids = [r.prompt_id for r in reports]
    if len(set(ids)) != len(ids):
        dup = sorted(i for i, n in Counter(ids).items() if n > 1)
        raise ValueError(f"duplicate prompt_id in reports: {dup}")
    easy = sorted(r.prompt_id for r in reports if r.c >= rho)
    hard = sorted(r.prompt_id for r in reports if r.c < rho)
    return Partition(tuple(easy), tuple(hard), rho, step)


def migrations(before: Partition | None, after: Partition) -> dict:
    if before is None:
        return {"easy_to_hard": 0, "hard_to_easy": 0}
    return {
        "easy_to_hard": len(set(before.easy) & set(after.hard)),
        "hard_to_easy": len(set(before.hard) & set(after.easy)),
    }


def select_pseudo_label(group: SampleGroup, report: ConsensusReport) -> Completion:
    """Majority-matching completion with the highest mean per-token log-prob."""
    idx = report.majority_indices(group.answers)
    if not idx:
        raise ConsensusError(f"no completion of {group.prompt_id!r} matches the majority answer")
    lengths = np.array([max(len(group.completions[i].raw), 1) for i in idx])
    scores = group.logprobs[idx] / lengths
    return group.completions[idx[int(np.argmax(scores))]]
