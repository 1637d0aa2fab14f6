"""Difficulty-aware self-curriculum loop.

Every ``K`` schedule steps the current policy re-samples ``M`` completions
per problem, agreement ratios are recomputed and problems are re-routed:
high-consensus problems get supervised steps on their majority
pseudo-label, low-consensus problems get GRPO steps on the composite
reward. A schedule step is one epoch; a cycle is ``sft_epochs_per_cycle``
SFT epochs followed by ``rl_epochs_per_cycle`` RL epochs, and ``K``
defaults to one cycle.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .consensus import (
    ConsensusReport,
    Partition,
    migrations,
    partition as make_partition,
    select_pseudo_label,
)
from .optim import RlBatch, SftBatch, grpo_advantages, grpo_step, sft_step
from .policy import PolicyParams, sample_completions, save_checkpoint
from .reward import RewardConfig, composite_reward
from .tasks import Completion, ProblemInstance, Vocabulary, oracle_trace

log = logging.getLogger(__name__)

_ROUTE, _RL, _EVAL = 0, 1, 2


@dataclass
class CurriculumConfig:
    m_consensus: int = 8
    rho: float = 0.45
    reroute_interval_k: int | None = None
    sft_epochs_per_cycle: int = 2
    rl_epochs_per_cycle: int = 10
    total_cycles: int = 4
    n_rl_completions: int = 32
    sft_batch_size: int = 8
    rl_batch_size: int = 8
    temperature: float = 0.9
    consensus_temperature: float = 0.9
    sft_lr: float = 1e-5
    rl_lr: float = 1e-6
    clip: float = 0.2
    inner_epochs: int = 1
    kl_coef: float = 0.0
    max_len: int = 64
    eval_m: int = 8
    eval_temperature: float = 0.9
    c_sft: float = 1.0
    c_rl: float = 1.0
    force_route: str | None = None
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if isinstance(self.reward, dict):
            self.reward = RewardConfig(**self.reward)
        for name in (
            "m_consensus", "total_cycles", "n_rl_completions", "sft_batch_size",
            "rl_batch_size", "inner_epochs", "max_len", "eval_m",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("sft_epochs_per_cycle", "rl_epochs_per_cycle"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.cycle_length < 1:
            raise ValueError("a cycle needs at least one SFT or RL epoch")
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.reroute_interval_k is not None and self.reroute_interval_k < 1:
            raise ValueError("reroute_interval_k must be >= 1")
        if self.n_rl_completions < 2:
            raise ValueError("n_rl_completions must be >= 2 for group normalization")
        for name in ("temperature", "consensus_temperature", "eval_temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if self.force_route not in (None, "easy", "hard"):
            raise ValueError("force_route must be None, 'easy' or 'hard'")

    @property
    def cycle_length(self) -> int:
        return self.sft_epochs_per_cycle + self.rl_epochs_per_cycle

    @property
    def k(self) -> int:
        return self.reroute_interval_k or self.cycle_length

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MetricsRecord:
    step: int
    phase: str
    cycle: int = 0
    accuracy_majority: float | None = None
    accuracy_any: float | None = None
    mean_c: float | None = None
    easy_fraction: float | None = None
    migration_counts: dict | None = None
    losses: dict | None = None
    reward_stats: dict | None = None
    tokens: dict | None = None
    by_depth: dict | None = None
    skipped: bool = False

    def __post_init__(self):
        for name in ("accuracy_majority", "accuracy_any", "easy_fraction"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**d)


@dataclass
class CycleState:
    cycle_index: int = 0
    partition: Partition | None = None
    reports: dict = field(default_factory=dict)
    sft_tokens: int = 0
    rl_tokens: int = 0
    sampling_tokens: int = 0
    counterfactual_rl_tokens: int = 0
    checkpoint: str | None = None
    c_sft: float = 1.0
    c_rl: float = 1.0

    def tokens(self) -> dict:
        return {
            "sft_tokens": self.sft_tokens,
            "rl_tokens": self.rl_tokens,
            "sampling_tokens": self.sampling_tokens,
            "counterfactual_rl_tokens": self.counterfactual_rl_tokens,
        }


def cost_accounting(state: CycleState) -> dict:
    """Token-count cost of the run relative to routing everything to RL.

    ``counterfactual_rl_tokens`` is the RL work an all-hard run would have
    done in the same RL epochs. Routing samples are shared by both and
    reported separately.
    """
    spent = state.sft_tokens * state.c_sft + state.rl_tokens * state.c_rl
    baseline = state.counterfactual_rl_tokens * state.c_rl
    ratio = spent / baseline if baseline > 0 else 1.0
    return {
        "sft_tokens": state.sft_tokens,
        "rl_tokens": state.rl_tokens,
        "sampling_tokens": state.sampling_tokens,
        "cost_ratio_vs_rl_only": ratio,
    }


def reroute_due(step: int, k: int) -> bool:
    if k < 1:
        raise ValueError("k must be >= 1")
    return step % k == 0


def derive_seed(seed: int, tag: int, step: int, prompt_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(tag, step, zlib.crc32(prompt_id.encode())))


def accuracy_from_answers(problems: Sequence[ProblemInstance], answers: Sequence[Sequence]) -> dict:
    """Majority-vote and per-sample accuracy against ground truth."""
    maj_hits, any_hits, n_samples, cs = [], 0, 0, []
    depth_hits: dict[int, list[int]] = {}
    for prob, ans in zip(problems, answers):
        report = ConsensusReport.from_answers(prob.id, list(ans))
        hit = int(report.a_maj == prob.ground_truth)
        maj_hits.append(hit)
        depth_hits.setdefault(prob.depth, []).append(hit)
        any_hits += sum(a == prob.ground_truth for a in ans)
        n_samples += len(ans)
        cs.append(report.c)
    return {
        "accuracy_majority": float(np.mean(maj_hits)),
        "accuracy_any": any_hits / n_samples,
        "mean_c": float(np.mean(cs)),
        "by_depth": {str(d): float(np.mean(h)) for d, h in sorted(depth_hits.items())},
    }


def eval_accuracy(
    params: PolicyParams,
    dataset: Sequence[ProblemInstance],
    m: int,
    temperature: float,
    seed: int,
    max_len: int = 64,
    step: int = 0,
    cycle: int = 0,
) -> MetricsRecord:
    if m < 1:
        raise ValueError("m must be >= 1")
    answers = [
        sample_completions(params, p.prompt, m, temperature, max_len, derive_seed(seed, _EVAL, 0, p.id), p.id).answers
        for p in dataset
    ]
    return MetricsRecord(step=step, phase="eval", cycle=cycle, **accuracy_from_answers(dataset, answers))


def pretrain_reference(
    vocab: Vocabulary,
    problems: Sequence[ProblemInstance],
    steps: int,
    lr: float,
    temperature: float = 1.0,
    feature_order: int = 2,
    aligned: bool = True,
    bias: bool = True,
) -> PolicyParams:
    """Supervised warm start on ground-truth traces of a held-out problem set.

    This only builds the starting policy; few steps give a deliberately
    under-trained reference.
    """
    params = PolicyParams.zeros(vocab, feature_order, aligned, bias)
    if steps <= 0 or not problems:
        return params
    batch = SftBatch([(p.prompt, Completion.from_raw(oracle_trace(p.prompt), vocab)) for p in problems])
    for _ in range(steps):
        params, _ = sft_step(params, batch, lr, temperature)
    return params


@dataclass
class RunResult:
    params: PolicyParams
    metrics: list[MetricsRecord]
    state: CycleState
    partitions: list[Partition]
    reroute_steps: list[int]

    def __iter__(self):
        return iter((self.params, self.metrics))


def _batches(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def run_disctt(
    config: CurriculumConfig,
    dataset: Sequence[ProblemInstance],
    params: PolicyParams,
    seed: int,
    *,
    out_dir=None,
    evaluate: bool = True,
    on_record: Callable[[MetricsRecord], None] | None = None,
) -> RunResult:
    if not dataset:
        raise ValueError("dataset must be non-empty")
    vocab = params.vocab
    problems = {p.id: p for p in dataset}
    if len(problems) != len(dataset):
        raise ValueError("dataset ids must be unique")
    ids = sorted(problems)
    ordered = [problems[i] for i in ids]
    cfg = config
    state = CycleState(c_sft=cfg.c_sft, c_rl=cfg.c_rl)
    metrics: list[MetricsRecord] = []
    partitions: list[Partition] = []
    reroute_steps: list[int] = []

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")

    def emit(rec: MetricsRecord):
        rec.tokens = state.tokens()
        metrics.append(rec)
        if metrics_fh is not None:
            metrics_fh.write(rec.to_json() + "\n")
        if on_record is not None:
            on_record(rec)

    def checkpoint(cycle: int):
        if out is not None:
            path = out / "checkpoints" / f"cycle_{cycle:03d}.json"
            save_checkpoint(params, path, cycle=cycle)
            state.checkpoint = str(path.relative_to(out))

    def evaluate_now(step: int, cycle: int):
        if evaluate:
            emit(eval_accuracy(params, ordered, cfg.eval_m, cfg.eval_temperature, seed, cfg.max_len, step, cycle))

    try:
        evaluate_now(0, 0)
        checkpoint(0)
        current: Partition | None = None
        pseudo: dict = {}
        route_len: dict = {}
        total_steps = cfg.total_cycles * cfg.cycle_length
        for t in range(total_steps):
            cycle = t // cfg.cycle_length
            state.cycle_index = cycle
            if reroute_due(t, cfg.k):
                current, pseudo, route_len = _reroute(params, ordered, cfg, seed, t, current, state, emit, cycle)
                reroute_steps.append(t)
            partitions.append(current)
            slot = t % cfg.cycle_length
            if slot < cfg.sft_epochs_per_cycle:
                params = _sft_epoch(params, current, problems, pseudo, cfg, state, emit, t, cycle)
            else:
                params = _rl_epoch(params, current, problems, route_len, cfg, seed, state, emit, t, cycle, vocab)
            if slot == cfg.cycle_length - 1:
                evaluate_now(t + 1, cycle + 1)
                checkpoint(cycle + 1)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return RunResult(params, metrics, state, partitions, reroute_steps)


def _reroute(params, ordered, cfg, seed, t, previous, state, emit, cycle):
    groups, reports = [], []
    for p in ordered:
        g = sample_completions(
            params, p.prompt, cfg.m_consensus, cfg.consensus_temperature, cfg.max_len,
            derive_seed(seed, _ROUTE, t, p.id), p.id,
        )
        groups.append(g)
        reports.append(ConsensusReport.from_group(g))
        state.sampling_tokens += g.token_count()
    if cfg.force_route is None:
        part = make_partition(reports, cfg.rho, t)
    else:
        all_ids = tuple(p.id for p in ordered)
        part = Partition(all_ids if cfg.force_route == "easy" else (), all_ids if cfg.force_route == "hard" else (), cfg.rho, t)
    state.partition = part
    state.reports = {r.prompt_id: r for r in reports}

    easy = set(part.easy)
    pseudo = {}
    unlabeled = 0
    for g, r in zip(groups, reports):
        if g.prompt_id in easy:
            if r.majority_indices(g.answers):
                pseudo[g.prompt_id] = select_pseudo_label(g, r)
            else:
                unlabeled += 1
    route_len = {g.prompt_id: float(np.mean([len(c.raw) for c in g.completions])) for g in groups}

    acc = accuracy_from_answers(ordered, [g.answers for g in groups])
    depth_easy: dict[int, list[int]] = {}
    for p in ordered:
        depth_easy.setdefault(p.depth, []).append(int(p.id in easy))
    emit(
        MetricsRecord(
            step=t,
            phase="route",
            cycle=cycle,
            accuracy_majority=acc["accuracy_majority"],
            accuracy_any=acc["accuracy_any"],
            mean_c=acc["mean_c"],
            easy_fraction=part.easy_fraction,
            migration_counts=migrations(previous, part),
            by_depth={str(d): float(np.mean(v)) for d, v in sorted(depth_easy.items())},
            losses={"unlabeled_easy": unlabeled},
        )
    )
    log.debug("step %d: rerouted, easy fraction %.3f", t, part.easy_fraction)
    return part, pseudo, route_len


def _sft_epoch(params, part, problems, pseudo, cfg, state, emit, t, cycle):
    items = [(problems[i].prompt, pseudo[i]) for i in part.easy if i in pseudo]
    if not items:
        emit(MetricsRecord(step=t, phase="sft", cycle=cycle, skipped=True))
        return params
    first = last = None
    for chunk in _batches(items, cfg.sft_batch_size):
        batch = SftBatch(chunk)
        params, rep = sft_step(params, batch, cfg.sft_lr, cfg.temperature)
        state.sft_tokens += batch.token_count()
        first = first or rep
        last = rep
    emit(
        MetricsRecord(
            step=t, phase="sft", cycle=cycle,
            losses={"loss_before": first.loss_before, "loss_after": last.loss_after, "grad_norm": last.grad_norm},
        )
    )
    return params


def _rl_epoch(params, part, problems, route_len, cfg, seed, state, emit, t, cycle, vocab):
    passes = 1 + cfg.inner_epochs
    for i in part.easy:
        prompt_len = len(problems[i].prompt)
        state.counterfactual_rl_tokens += int(round(cfg.n_rl_completions * (prompt_len + route_len[i]) * passes))
    if not part.hard:
        emit(MetricsRecord(step=t, phase="rl", cycle=cycle, skipped=True))
        return params
    totals, gates, novs, rels, clipped, surrogate = [], [], [], [], [], []
    for chunk in _batches(list(part.hard), cfg.rl_batch_size):
        batches, advs = [], []
        for pid in chunk:
            p = problems[pid]
            g = sample_completions(
                params, p.prompt, cfg.n_rl_completions, cfg.temperature, cfg.max_len,
                derive_seed(seed, _RL, t, pid), pid,
            )
            report = ConsensusReport.from_group(g)
            rb = composite_reward(g, report, cfg.reward, p.prompt, vocab=vocab)
            rewards = np.array([r.total for r in rb])
            batches.append(RlBatch.from_group(g, rewards))
            advs.append(grpo_advantages(rewards))
            tokens = g.token_count() * passes
            state.rl_tokens += tokens
            state.counterfactual_rl_tokens += tokens
            totals += rewards.tolist()
            gates += [r.gate for r in rb]
            novs += [r.jsd_nov for r in rb if r.gate]
            rels += [r.g_rel for r in rb]
        params, rep = grpo_step(
            params, batches, advs, cfg.clip, cfg.rl_lr, cfg.temperature, cfg.inner_epochs, cfg.kl_coef
        )
        clipped.append(rep.clipped_fraction)
        surrogate.append(-rep.loss_after)
    emit(
        MetricsRecord(
            step=t, phase="rl", cycle=cycle,
            losses={"surrogate_after": float(np.mean(surrogate)), "clipped_fraction": float(np.mean(clipped))},
            reward_stats={
                "mean_total": float(np.mean(totals)),
                "gate_rate": float(np.mean(gates)),
                "mean_jsd_nov": float(np.mean(novs)) if novs else 0.0,
                "mean_g_rel": float(np.mean(rels)),
            },
        )
    )
    return params
