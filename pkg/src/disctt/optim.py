"""Supervised consolidation and group-relative policy optimization steps."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy import PackedSequences, PolicyParams, packed_grad, packed_logprobs
from .tasks import Completion


@dataclass
class SftBatch:
    items: list[tuple[tuple, Completion]]

    def __post_init__(self):
        for _, comp in self.items:
            if not comp.parseable:
                raise ValueError("SFT pseudo-labels must have a parseable answer")

    def __len__(self):
        return len(self.items)

    def token_count(self) -> int:
        return sum(len(p) + len(c.raw) for p, c in self.items)


@dataclass
class RlBatch:
    prompt: tuple
    completions: list[Completion]
    old_logprobs: np.ndarray
    rewards: np.ndarray
    features: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.old_logprobs = np.asarray(self.old_logprobs, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        n = len(self.completions)
        if not (n == len(self.old_logprobs) == len(self.rewards)):
            raise ValueError("completions, old_logprobs and rewards must have equal length")
        if n < 2:
            raise ValueError("an RL group needs at least 2 completions")

    @classmethod
    def from_group(cls, group, rewards) -> "RlBatch":
        return cls(group.prompt, group.completions, group.logprobs, rewards, group.features or None)

    def token_count(self) -> int:
        return sum(len(self.prompt) + len(c.raw) for c in self.completions)


@dataclass(frozen=True)
class UpdateReport:
    loss_before: float
    loss_after: float
    grad_norm: float
    step_size: float
    clipped_fraction: float | None = None


def _pack_sft(params: PolicyParams, batch: SftBatch) -> PackedSequences:
    return PackedSequences.build(params, batch.items)


def sft_loss(params: PolicyParams, batch: SftBatch, temperature: float) -> float:
    if not batch.items:
        raise ValueError("empty SFT batch")
    lp, _ = packed_logprobs(params, _pack_sft(params, batch), temperature)
    return float(-lp.mean())


def sft_step(params: PolicyParams, batch: SftBatch, lr: float, temperature: float):
    """One full-batch gradient-descent step on the mean negative log-likelihood."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    packed = _pack_sft(params, batch)
    lp, probs = packed_logprobs(params, packed, temperature)
    n = len(batch)
    grad = -packed_grad(params, packed, temperature, np.full(n, 1.0 / n), probs=probs)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite SFT gradient")
    new = params.with_theta(params.theta - lr * grad)
    lp_after, _ = packed_logprobs(new, packed, temperature)
    return new, UpdateReport(
        loss_before=float(-lp.mean()),
        loss_after=float(-lp_after.mean()),
        grad_norm=float(np.linalg.norm(grad)),
        step_size=lr,
    )


def grpo_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least 2 rewards to normalize")
    centered = r - r.mean()
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return centered / (r.std() + 1e-8)


def _as_lists(batch, advantages):
    if isinstance(batch, RlBatch):
        return [batch], [np.asarray(advantages, dtype=np.float64)]
    return list(batch), [np.asarray(a, dtype=np.float64) for a in advantages]


def _pack_rl(params, batches) -> tuple[PackedSequences, list[slice]]:
    items, feats, spans, start = [], [], [], 0
    have_feats = all(b.features is not None for b in batches)
    for b in batches:
        items += [(b.prompt, c) for c in b.completions]
        if have_feats:
            feats += list(b.features)
        spans.append(slice(start, start + len(b.completions)))
        start += len(b.completions)
    return PackedSequences.build(params, items, feats if have_feats else None), spans


def grpo_surrogate(params, batch, advantages, temperature, clip=0.2, kl_coef=0.0, packed=None):
    """Clipped surrogate objective and its exact gradient.

    Per prompt: mean_i min(r_i A_i, clip(r_i, 1-c, 1+c) A_i), with
    sequence-level ratios r_i = exp(logp_new - logp_old); prompts are
    averaged. With ``kl_coef`` the sample estimate of KL(old || new) is
    subtracted. Returns ``(value, grad, clipped_fraction)``.
    """
    batches, advs = _as_lists(batch, advantages)
    if packed is None:
        packed = _pack_rl(params, batches)
    packed, spans = packed
    new_lp, probs = packed_logprobs(params, packed, temperature)
    old_lp = np.concatenate([b.old_logprobs for b in batches])
    A = np.concatenate(advs)
    if A.shape != old_lp.shape:
        raise ValueError("advantages do not match the batch")
    ratio = np.exp(new_lp - old_lp)
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError("non-finite importance ratio")
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_obj, clipped_obj = ratio * A, clipped * A
    use_unclipped = unclipped_obj <= clipped_obj
    per = np.minimum(unclipped_obj, clipped_obj)
    # weight of each sequence in the prompt-averaged objective
    w = np.empty_like(A)
    for s in spans:
        w[s] = 1.0 / ((s.stop - s.start) * len(spans))
    value = float(np.sum(w * per))
    dweights = w * np.where(use_unclipped, A * ratio, 0.0)
    if kl_coef:
        value -= kl_coef * float(np.sum(w * (old_lp - new_lp)))
        dweights = dweights + kl_coef * w
    grad = packed_grad(params, packed, temperature, dweights, probs=probs)
    frac = float(np.mean(~use_unclipped & (clipped != ratio)))
    return value, grad, frac


def grpo_step(
    params: PolicyParams,
    batch,
    advantages,
    clip: float = 0.2,
    lr: float = 1e-6,
    temperature: float = 0.9,
    inner_epochs: int = 1,
    kl_coef: float = 0.0,
):
    """Gradient ascent on the clipped surrogate for ``inner_epochs`` steps.

    ``batch`` is one :class:`RlBatch` or a list of them with matching
    ``advantages``.
    """
    if not 0 < clip < 1:
        raise ValueError("clip must lie in (0, 1)")
    if inner_epochs < 1:
        raise ValueError("inner_epochs must be >= 1")
    batches, advs = _as_lists(batch, advantages)
    packed = _pack_rl(params, batches)
    first = None
    for _ in range(inner_epochs):
        value, grad, frac = grpo_surrogate(params, batches, advs, temperature, clip, kl_coef, packed=packed)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite surrogate gradient")
        if first is None:
            first = (value, float(np.linalg.norm(grad)), frac)
        params = params.with_theta(params.theta + lr * grad)
    after, _, _ = grpo_surrogate(params, batches, advs, temperature, clip, kl_coef, packed=packed)
    return params, UpdateReport(
        loss_before=-first[0],
        loss_after=-after,
        grad_norm=first[1],
        step_size=lr,
        clipped_fraction=first[2],
    )
