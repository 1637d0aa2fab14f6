"""Scikit-learn style wrapper around the test-time curriculum.

``fit`` adapts a policy on the unlabeled prompts it is given (labels are
optional and only used for the evaluation records), ``predict`` returns
majority-vote answers and ``transform`` returns agreement ratios, the
quantity used for routing.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .consensus import ConsensusReport, render_answer
from .curriculum import _EVAL, CurriculumConfig, derive_seed, pretrain_reference, run_disctt
from .policy import PolicyParams, sample_completions
from .reward import RewardConfig
from .tasks import ProblemInstance, Vocabulary, gen_dataset, parse_prompt

_MODES = {"disctt": None, "sft_only": "easy", "rl_only": "hard"}


def check_prompts(X, modulus: int | None = None) -> list[tuple[str, ...]]:
    """Normalize prompts to token tuples and validate their grammar.

    Accepts strings (whitespace tokenized), token sequences, or
    :class:`ProblemInstance` objects. A trailing ``<q>`` is added if missing.
    """
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of prompts")
    if len(X) == 0:
        raise ValueError("X must contain at least one prompt")
    out = []
    for i, x in enumerate(X):
        if isinstance(x, ProblemInstance):
            x = x.prompt
        toks = tuple(x.split()) if isinstance(x, str) else tuple(str(t) for t in x)
        if not toks or toks[-1] != "<q>":
            toks = toks + ("<q>",)
        try:
            _, _, m = parse_prompt(toks)
        except ValueError as exc:
            raise ValueError(f"prompt {i} is malformed: {exc}") from None
        if modulus is not None and m != modulus:
            raise ValueError(f"prompt {i} uses modulus {m}, expected {modulus}")
        out.append(toks)
    return out


def check_answers(y, n: int) -> list[tuple[str, ...]]:
    if len(y) != n:
        raise ValueError(f"y has {len(y)} entries for {n} prompts")
    return [tuple(str(a).split()) if not isinstance(a, (tuple, list)) else tuple(map(str, a)) for a in y]


class DiSCTTAdapter(TransformerMixin, BaseEstimator):
    """Adapt a log-linear policy to a prompt set at test time.

    Parameters mirror :class:`CurriculumConfig` plus the settings of the
    supervised warm start used when no ``initial_params`` is supplied.
    """

    def __init__(
        self,
        modulus: int = 11,
        mode: str = "disctt",
        m_consensus: int = 8,
        rho: float = 0.45,
        total_cycles: int = 4,
        sft_epochs_per_cycle: int = 2,
        rl_epochs_per_cycle: int = 10,
        n_rl_completions: int = 32,
        temperature: float = 0.9,
        sft_lr: float = 20.0,
        rl_lr: float = 20.0,
        alpha: float = 1.0,
        beta: float = 1.0,
        epsilon: float = 0.2,
        pretrain_steps: int = 30,
        pretrain_lr: float = 20.0,
        pretrain_count: int = 300,
        initial_params: PolicyParams | None = None,
        random_state: int = 0,
    ):
        self.modulus = modulus
        self.mode = mode
        self.m_consensus = m_consensus
        self.rho = rho
        self.total_cycles = total_cycles
        self.sft_epochs_per_cycle = sft_epochs_per_cycle
        self.rl_epochs_per_cycle = rl_epochs_per_cycle
        self.n_rl_completions = n_rl_completions
        self.temperature = temperature
        self.sft_lr = sft_lr
        self.rl_lr = rl_lr
        self.alpha = alpha
        self.beta = beta
        self.epsilon = epsilon
        self.pretrain_steps = pretrain_steps
        self.pretrain_lr = pretrain_lr
        self.pretrain_count = pretrain_count
        self.initial_params = initial_params
        self.random_state = random_state

    def _config(self) -> CurriculumConfig:
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {sorted(_MODES)}, got {self.mode!r}")
        return CurriculumConfig(
            m_consensus=self.m_consensus,
            rho=self.rho,
            total_cycles=self.total_cycles,
            sft_epochs_per_cycle=self.sft_epochs_per_cycle,
            rl_epochs_per_cycle=self.rl_epochs_per_cycle,
            n_rl_completions=self.n_rl_completions,
            temperature=self.temperature,
            consensus_temperature=self.temperature,
            eval_temperature=self.temperature,
            sft_lr=self.sft_lr,
            rl_lr=self.rl_lr,
            eval_m=self.m_consensus,
            force_route=_MODES[self.mode],
            reward=RewardConfig(self.alpha, self.beta, self.epsilon),
        )

    def _initial(self, vocab: Vocabulary) -> PolicyParams:
        if self.initial_params is not None:
            if self.initial_params.vocab != vocab:
                raise ValueError("initial_params vocabulary does not match modulus")
            return self.initial_params
        pre = gen_dataset(1000 + self.random_state, self.pretrain_count, (1, 4), self.modulus)
        return pretrain_reference(vocab, pre, self.pretrain_steps, self.pretrain_lr, feature_order=1, bias=False)

    def fit(self, X, y=None):
        cfg = self._config()
        prompts = check_prompts(X, self.modulus)
        labels = check_answers(y, len(prompts)) if y is not None else None
        vocab = Vocabulary.for_modulus(self.modulus)
        problems = []
        for i, p in enumerate(prompts):
            _, steps, _ = parse_prompt(p)
            gt = labels[i] if labels is not None else ()
            problems.append(ProblemInstance(f"x{i:05d}", p, gt, len(steps), self.modulus))
        result = run_disctt(cfg, problems, self._initial(vocab), self.random_state, evaluate=labels is not None)
        self.params_ = result.params
        self.metrics_ = result.metrics
        self.partitions_ = result.partitions
        self.state_ = result.state
        self.n_features_in_ = 1
        return self

    def _reports(self, X) -> list[ConsensusReport]:
        check_is_fitted(self, "params_")
        prompts = check_prompts(X, self.modulus)
        reports = []
        for i, p in enumerate(prompts):
            pid = f"x{i:05d}"
            seed = derive_seed(self.random_state, _EVAL, 0, pid)
            g = sample_completions(self.params_, p, self.m_consensus, self.temperature, 64, seed, pid)
            reports.append(ConsensusReport.from_group(g))
        return reports

    def predict(self, X) -> np.ndarray:
        """Majority-vote answer per prompt as a string (None when unparseable)."""
        return np.array([render_answer(r.a_maj) for r in self._reports(X)], dtype=object)

    def transform(self, X) -> np.ndarray:
        """Agreement ratio per prompt, shape ``(n, 1)``."""
        return np.array([[r.c] for r in self._reports(X)])

    def score(self, X, y) -> float:
        """Majority-vote accuracy against reference answers."""
        pred = self.predict(X)
        truth = [" ".join(a) for a in check_answers(y, len(pred))]
        return float(np.mean([p == t for p, t in zip(pred, truth)]))
