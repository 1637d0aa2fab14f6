"""Composite reward for low-consensus problems.

    R(y_i) = 1[a_i = a_maj] * (alpha + beta * nov_i) * (eps + (1 - eps) * rel_i)

``nov_i`` is the mean Jensen-Shannon divergence between the trace's own
next-token distributions and the position-wise average over majority
traces; ``rel_i`` is the mean clipped cosine between step embeddings and
the prompt embedding. Only reasoning-token positions enter either term.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import rel_entr

from .consensus import ConsensusReport
from .policy import SampleGroup
from .tasks import Vocabulary

LN2 = float(np.log(2.0))

Embedder = Callable[[Sequence[str]], np.ndarray]


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    beta: float = 1.0
    epsilon: float = 0.2
    leave_one_out: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")

    @classmethod
    def ablation(cls, mode: str, alpha=1.0, beta=1.0, epsilon=0.2) -> "RewardConfig":
        """``gate`` (correctness only), ``novelty`` (gate + JSD) or ``full``."""
        if mode == "gate":
            return cls(alpha, 0.0, 1.0)
        if mode == "novelty":
            return cls(alpha, beta, 1.0)
        if mode == "full":
            return cls(alpha, beta, epsilon)
        raise ValueError(f"unknown ablation mode {mode!r}")


@dataclass(frozen=True)
class RewardBreakdown:
    completion_index: int
    gate: int
    jsd_nov: float
    g_rel: float
    relevance_factor: float
    total: float
    majority_index_set: tuple[int, ...]


def js_divergence(p, q) -> float | np.ndarray:
    """Jensen-Shannon divergence in nats along the last axis.

    Zero-probability entries contribute nothing (limit convention), so the
    endpoints 0 and ln 2 are exact.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    js = 0.5 * rel_entr(p, m).sum(axis=-1) + 0.5 * rel_entr(q, m).sum(axis=-1)
    js = np.clip(js, 0.0, LN2)
    return float(js) if js.ndim == 0 else js


def reference_dists(group: SampleGroup, majority_indices: Sequence[int], exclude: int | None = None) -> list[np.ndarray]:
    """Position-wise mean of majority traces' distributions.

    Entry ``t`` averages the traces longer than ``t``; the list stops where
    no trace remains, so an empty list means there is no reference at all.
    """
    members = list(majority_indices)
    if not members:
        raise ValueError("majority_indices must be non-empty")
    if exclude is not None and exclude in members and len(members) >= 2:
        members.remove(exclude)
    dists = group.per_position_dists
    longest = max(len(dists[i]) for i in members)
    ref = []
    for t in range(longest):
        rows = [dists[i][t] for i in members if len(dists[i]) > t]
        ref.append(np.mean(rows, axis=0))
    return ref


def novelty_score(trace_dists: Sequence[np.ndarray], reference: Sequence[np.ndarray | None]) -> float:
    n = min(len(trace_dists), len(reference))
    present = [t for t in range(n) if reference[t] is not None]
    if not present:
        return 0.0
    p = np.array([trace_dists[t] for t in present])
    q = np.array([reference[t] for t in present])
    return float(np.mean(js_divergence(p, q)))


def segment_trace(trace: Sequence[str], vocab: Vocabulary) -> list[tuple[str, ...]]:
    segments, cur = [], []
    for tok in trace:
        if tok == vocab.step_sep:
            if cur:
                segments.append(tuple(cur))
            cur = []
        else:
            cur.append(tok)
    if cur:
        segments.append(tuple(cur))
    return segments


class BagOfTokensEmbedder:
    """L2-normalized token-count vector over the vocabulary."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def __call__(self, text: Sequence[str]) -> np.ndarray:
        v = np.zeros(len(self.vocab))
        for tok in text:
            v[self.vocab.index(tok)] += 1.0
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v


def embed(text: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    return BagOfTokensEmbedder(vocab)(text)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(u @ v / (nu * nv))


def relevance_gate(segments: Sequence[Sequence[str]], prompt: Sequence[str], embedder: Embedder | None = None, *, _cache=None) -> float:
    """Mean over steps of the clipped cosine to the prompt embedding."""
    if not segments:
        return 0.0
    if embedder is None:
        raise ValueError("an embedder is required")
    cache = {} if _cache is None else _cache
    if "prompt" not in cache:
        cache["prompt"] = embedder(prompt)
    sims = []
    for s in segments:
        s = tuple(s)
        if s not in cache:
            cache[s] = min(max(_cosine(embedder(s), cache["prompt"]), 0.0), 1.0)
        sims.append(cache[s])
    return float(np.mean(sims))


def composite_reward(
    group: SampleGroup,
    report: ConsensusReport,
    config: RewardConfig,
    prompt: Sequence[str] | None = None,
    *,
    vocab: Vocabulary,
    embedder: Embedder | None = None,
) -> list[RewardBreakdown]:
    prompt = tuple(group.prompt if prompt is None else prompt)
    embedder = embedder or BagOfTokensEmbedder(vocab)
    answers = group.answers
    maj = tuple(report.majority_indices(answers))
    dists = group.per_position_dists
    shared_ref = reference_dists(group, maj) if maj and not config.leave_one_out else None
    rel_cache: dict = {}

    out = []
    for i, comp in enumerate(group.completions):
        gate = int(i in maj)
        if maj:
            ref = shared_ref if shared_ref is not None else reference_dists(group, maj, exclude=i)
            nov = novelty_score(dists[i], ref)
        else:
            nov = 0.0
        g_rel = relevance_gate(segment_trace(comp.trace, vocab), prompt, embedder, _cache=rel_cache)
        factor = config.epsilon + (1.0 - config.epsilon) * g_rel
        total = gate * (config.alpha + config.beta * nov) * factor
        out.append(RewardBreakdown(i, gate, nov, g_rel, factor, total, maj))
    return out
