"""Autoregressive log-linear policy over sparse context features.

Each generation position activates a fixed number of binary features and
the next-token logits are the sum of the weight rows of those features::

    p(. | x, r_<t) = softmax(sum_f theta[f, :] / T)

Feature families (all one-hot, exactly one active per family):

* bias, always on;
* n-gram: the previous ``feature_order - 1`` tokens of prompt + prefix;
* step-aligned (optional): the slot the writer is in inside the current
  reasoning segment, conjoined with the prompt tokens that slot refers to
  (the k-th operator / operand) or, for the result slot, with the running
  value, operator and operand already written in the segment.

The aligned family is what lets a linear model carry prompt content into
the trace; with it the solver is exactly representable, without it the
policy is a plain n-gram model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tasks import (
    OPS,
    Completion,
    PromptParseError,
    Vocabulary,
    parse_prompt,
)

_NONE = -1


@dataclass(frozen=True)
class FeatureMap:
    vocab: Vocabulary
    order: int = 2
    aligned: bool = True
    bias: bool = True
    _num_index: np.ndarray = field(init=False, repr=False, compare=False)
    _op_index: np.ndarray = field(init=False, repr=False, compare=False)
    _offsets: dict = field(init=False, repr=False, compare=False)
    _n_numbers: int = field(init=False, repr=False, compare=False)
    _count: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("feature order must be >= 1")
        V = len(self.vocab)
        num_index = np.full(V, _NONE, dtype=np.int64)
        for j, i in enumerate(self.vocab.number_ids):
            num_index[i] = j
        op_index = np.full(V, _NONE, dtype=np.int64)
        for j, op in enumerate(OPS):
            if op in self.vocab:
                op_index[self.vocab.index(op)] = j
        object.__setattr__(self, "_num_index", num_index)
        object.__setattr__(self, "_op_index", op_index)
        object.__setattr__(self, "_n_numbers", len(self.vocab.number_ids))

        nn, no = self.n_numbers + 1, len(OPS) + 1
        sizes = {}
        if self.bias:
            sizes["bias"] = 1
        if self.order >= 2:
            sizes["ngram"] = (V + 1) ** (self.order - 1)
        if self.aligned:
            sizes.update(
                op=no, operand=nn, result=nn * no * nn, close=2, overflow=1, ans_copy=nn, ans_end=1
            )
        if not sizes:
            raise ValueError("feature map has no active family")
        offsets, total = {}, 0
        for name, size in sizes.items():
            offsets[name] = total
            total += size
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "_count", total)

    @property
    def n_numbers(self) -> int:
        return self._n_numbers

    @property
    def feature_count(self) -> int:
        return self._count

    @property
    def n_active(self) -> int:
        return int(self.bias) + (self.order >= 2) + int(self.aligned)

    def offset(self, family: str) -> int:
        return self._offsets[family]

    def cursor(self, prompt_ids: Sequence[int]) -> "_Cursor":
        return _Cursor(self, prompt_ids)

    def sequence_features(self, prompt_ids: Sequence[int], gen_ids: Sequence[int]) -> np.ndarray:
        """Active features at every generated position, shape ``(len(gen), n_active)``."""
        cur = self.cursor(prompt_ids)
        out = np.empty((len(gen_ids), self.n_active), dtype=np.int64)
        for t, tok in enumerate(gen_ids):
            out[t] = cur.features()
            cur.push(int(tok))
        return out

    def header(self) -> dict:
        return {"feature_order": self.order, "aligned": self.aligned, "bias": self.bias, "vocab": list(self.vocab.tokens)}


class _Cursor:
    """Incremental feature state for one sequence being written."""

    def __init__(self, fmap: FeatureMap, prompt_ids: Sequence[int]):
        self.fmap = fmap
        vocab = fmap.vocab
        self._V = len(vocab)
        self._nnum = fmap.n_numbers
        self._num_of = fmap._num_index.tolist()
        self._op_of = fmap._op_index.tolist()
        self._off = fmap._offsets
        self._sep = vocab.index(vocab.step_sep)
        self._delim = vocab.index(vocab.answer_delim)
        prompt_ids = [int(i) for i in prompt_ids]
        try:
            first, steps, _ = parse_prompt(vocab.decode(prompt_ids))
            self._ops = [vocab.index(op) for op, _ in steps]
            self._operands = [vocab.index(str(b)) for _, b in steps]
            self.last_result = vocab.index(str(first)) if str(first) in vocab else _NONE
        except (PromptParseError, KeyError):
            self._ops, self._operands, self.last_result = [], [], _NONE
        pad = len(vocab)
        self.window = ([pad] * (fmap.order - 1) + prompt_ids)[-(fmap.order - 1):] if fmap.order >= 2 else []
        self.k = 0
        self.phase = 0
        self.seg = [_NONE, _NONE]
        self.answer_pos = None

    def push(self, tok: int) -> None:
        if self.fmap.order >= 2:
            self.window = self.window[1:] + [tok]
        if tok == self._delim:
            self.answer_pos = 0
            return
        if self.answer_pos is not None:
            self.answer_pos += 1
            return
        if tok == self._sep:
            self.k += 1
            self.phase = 0
            self.seg = [_NONE, _NONE]
            return
        if self.phase < 2:
            self.seg[self.phase] = tok
        elif self.phase == 2:
            self.last_result = tok
        self.phase += 1

    def features(self) -> list[int]:
        feats = [0] if self.fmap.bias else []
        if self.fmap.order >= 2:
            idx = 0
            for tok in self.window:
                idx = idx * (self._V + 1) + tok
            feats.append(self._off["ngram"] + idx)
        if self.fmap.aligned:
            feats.append(self._aligned())
        return feats

    def _num(self, tok: int) -> int:
        j = self._num_of[tok] if tok != _NONE else _NONE
        return j if j != _NONE else self._nnum

    def _op(self, tok: int) -> int:
        j = self._op_of[tok] if tok != _NONE else _NONE
        return j if j != _NONE else len(OPS)

    def _aligned(self) -> int:
        off = self._off
        if self.answer_pos is not None:
            if self.answer_pos == 0:
                return off["ans_copy"] + self._num(self.last_result)
            return off["ans_end"]
        k = self.k
        if self.phase == 0:
            return off["op"] + (self._op(self._ops[k]) if k < len(self._ops) else len(OPS))
        if self.phase == 1:
            return off["operand"] + (self._num(self._operands[k]) if k < len(self._operands) else self._nnum)
        if self.phase == 2:
            nn, no = self._nnum + 1, len(OPS) + 1
            a, op, b = self._num(self.last_result), self._op(self.seg[0]), self._num(self.seg[1])
            return off["result"] + (a * no + op) * nn + b
        if self.phase == 3:
            return off["close"] + int(k + 1 >= len(self._ops))
        return off["overflow"]


@dataclass(frozen=True)
class PolicyParams:
    theta: np.ndarray
    features: FeatureMap

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != self.features.feature_count * self.vocab_size:
            raise ValueError(
                f"theta has {theta.size} entries, expected {self.features.feature_count} x {self.vocab_size}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, vocab: Vocabulary, feature_order: int = 2, aligned: bool = True, bias: bool = True) -> "PolicyParams":
        fmap = FeatureMap(vocab, feature_order, aligned, bias)
        return cls(np.zeros(fmap.feature_count * len(vocab)), fmap)

    @property
    def feature_order(self) -> int:
        return self.features.order

    @property
    def vocab_size(self) -> int:
        return len(self.features.vocab)

    @property
    def vocab(self) -> Vocabulary:
        return self.features.vocab

    @property
    def weights(self) -> np.ndarray:
        return self.theta.reshape(self.features.feature_count, self.vocab_size)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(theta, self.features)


@dataclass(frozen=True)
class NextTokenDist:
    probs: np.ndarray

    def __post_init__(self):
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("not a normalized distribution")


@dataclass
class SampleGroup:
    prompt_id: str
    prompt: tuple
    completions: list[Completion]
    dists: list[np.ndarray]
    logprobs: np.ndarray
    temperature: float
    seed: object
    features: list[np.ndarray] = field(repr=False, default_factory=list)

    def __len__(self):
        return len(self.completions)

    @property
    def per_position_dists(self) -> list[np.ndarray]:
        """Distributions at reasoning-token positions only (the trace prefix)."""
        return [d[: len(c.trace)] for d, c in zip(self.dists, self.completions)]

    @property
    def answers(self) -> list:
        return [c.answer for c in self.completions]

    def token_count(self) -> int:
        return sum(len(self.prompt) + len(c.raw) for c in self.completions)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _ids(vocab: Vocabulary, seq) -> np.ndarray:
    if isinstance(seq, Completion):
        seq = seq.raw
    if isinstance(seq, str):
        seq = seq.split()
    return vocab.encode(seq)


def next_dist(params: PolicyParams, prompt, prefix, temperature: float) -> NextTokenDist:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    vocab = params.vocab
    cur = params.features.cursor(_ids(vocab, prompt))
    for tok in _ids(vocab, prefix):
        cur.push(int(tok))
    logits = params.weights[cur.features()].sum(axis=0) / temperature
    return NextTokenDist(_softmax_rows(logits))


def sample_completions(
    params: PolicyParams,
    prompt,
    m: int,
    temperature: float,
    max_len: int = 64,
    seed=0,
    prompt_id: str = "",
) -> SampleGroup:
    """Draw ``m`` completions by inverse-CDF sampling, recording every
    per-position distribution and the total log-probability."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    vocab = params.vocab
    W = params.weights
    eos = vocab.eos_id
    prompt_ids = _ids(vocab, prompt)
    rng = np.random.default_rng(seed)
    cursors = [params.features.cursor(prompt_ids) for _ in range(m)]
    gen: list[list[int]] = [[] for _ in range(m)]
    feats: list[list[list[int]]] = [[] for _ in range(m)]
    rows: list[list[np.ndarray]] = [[] for _ in range(m)]
    lps = np.zeros(m)
    alive = list(range(m))
    for _ in range(max_len):
        if not alive:
            break
        f = np.array([cursors[i].features() for i in alive])
        probs = _softmax_rows(W[f].sum(axis=1) / temperature)
        cum = np.cumsum(probs, axis=1)
        u = rng.random(len(alive)) * cum[:, -1]
        toks = (cum <= u[:, None]).sum(axis=1)
        still = []
        for j, i in enumerate(alive):
            tok = int(toks[j])
            if tok >= len(vocab):
                tok = int(np.argmax(probs[j]))
            gen[i].append(tok)
            feats[i].append(f[j].tolist())
            rows[i].append(probs[j])
            lps[i] += np.log(probs[j, tok])
            cursors[i].push(tok)
            if tok != eos:
                still.append(i)
        alive = still
    V = len(vocab)
    completions = [Completion.from_raw(vocab.decode(g), vocab) for g in gen]
    dists = [np.array(r).reshape(len(r), V) for r in rows]
    features = [np.array(fl, dtype=np.int64).reshape(len(fl), params.features.n_active) for fl in feats]
    return SampleGroup(
        prompt_id=prompt_id,
        prompt=tuple(vocab.decode(prompt_ids)),
        completions=completions,
        dists=dists,
        logprobs=lps,
        temperature=temperature,
        seed=seed,
        features=features,
    )


@dataclass
class PackedSequences:
    """Several generations flattened for vectorized scoring."""

    feats: np.ndarray  # (P, n_active)
    tokens: np.ndarray  # (P,)
    seq: np.ndarray  # (P,) owning sequence index
    n: int

    @classmethod
    def build(cls, params: PolicyParams, items, features=None) -> "PackedSequences":
        """``items`` is a list of ``(prompt, completion)``; ``features`` may
        supply precomputed per-sequence feature arrays."""
        vocab = params.vocab
        fs, ts, ss = [], [], []
        for i, (prompt, comp) in enumerate(items):
            gen = _ids(vocab, comp)
            f = features[i] if features is not None else params.features.sequence_features(_ids(vocab, prompt), gen)
            fs.append(f)
            ts.append(gen)
            ss.append(np.full(len(gen), i, dtype=np.int64))
        A = params.features.n_active
        return cls(
            feats=np.concatenate(fs) if fs else np.empty((0, A), dtype=np.int64),
            tokens=np.concatenate(ts) if ts else np.empty(0, dtype=np.int64),
            seq=np.concatenate(ss) if ss else np.empty(0, dtype=np.int64),
            n=len(items),
        )

    def lengths(self) -> np.ndarray:
        return np.bincount(self.seq, minlength=self.n)


def packed_logprobs(params: PolicyParams, packed: PackedSequences, temperature: float):
    """Per-sequence log-probabilities and the position-wise probabilities."""
    probs = _softmax_rows(params.weights[packed.feats].sum(axis=1) / temperature)
    chosen = np.log(probs[np.arange(len(packed.tokens)), packed.tokens])
    return np.bincount(packed.seq, weights=chosen, minlength=packed.n), probs


def packed_grad(params: PolicyParams, packed: PackedSequences, temperature: float, weights, probs=None) -> np.ndarray:
    """Gradient of ``sum_i weights[i] * logprob_i`` with respect to theta."""
    if probs is None:
        _, probs = packed_logprobs(params, packed, temperature)
    w = np.asarray(weights, dtype=np.float64)[packed.seq]
    delta = -probs * w[:, None]
    delta[np.arange(len(packed.tokens)), packed.tokens] += w
    delta /= temperature
    G = np.zeros((params.features.feature_count, params.vocab_size))
    A = packed.feats.shape[1]
    np.add.at(G, packed.feats.reshape(-1), np.repeat(delta, A, axis=0))
    return G.reshape(-1)


def logprob(params: PolicyParams, prompt, completion, temperature: float) -> float:
    packed = PackedSequences.build(params, [(prompt, completion)])
    lp, _ = packed_logprobs(params, packed, temperature)
    return float(lp[0])


def grad_logprob(params: PolicyParams, prompt, completion, temperature: float) -> np.ndarray:
    packed = PackedSequences.build(params, [(prompt, completion)])
    return packed_grad(params, packed, temperature, [1.0])


def save_checkpoint(params: PolicyParams, path, **meta) -> None:
    header = params.features.header()
    header["vocab_size"] = params.vocab_size
    header.update(meta)
    payload = {"header": header, "theta": params.theta.tolist()}
    Path(path).write_text(json.dumps(payload) + "\n")


def load_checkpoint(path) -> PolicyParams:
    payload = json.loads(Path(path).read_text())
    h = payload["header"]
    vocab = Vocabulary(tuple(h["vocab"]))
    if len(vocab) != h["vocab_size"]:
        raise ValueError("checkpoint vocab_size does not match its vocabulary")
    fmap = FeatureMap(vocab, int(h["feature_order"]), bool(h["aligned"]), bool(h.get("bias", True)))
    return PolicyParams(np.array(payload["theta"], dtype=np.float64), fmap)
