from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disctt.consensus import (
    ConsensusReport,
    agreement_ratio,
    majority_answer,
    migrations,
    partition,
    select_pseudo_label,
)
from disctt.tasks import UNPARSEABLE, Vocabulary

from conftest import make_group

V = Vocabulary.for_modulus(11)
PROMPT = ("3", "+", "4", "mod", "11", "<q>")

answer_st = st.one_of(st.just(UNPARSEABLE), st.tuples(st.sampled_from(["0", "1", "2", "3", "10"])))


def brute_majority(answers):
    """Scan every candidate, keep strictly larger counts, and break ties explicitly."""
    best, best_n = None, -1
    for cand in set(answers):
        n = sum(1 for a in answers if a == cand)
        if n > best_n:
            best, best_n = cand, n
        elif n == best_n:
            if best is UNPARSEABLE or (cand is not UNPARSEABLE and cand < best):
                best = cand
    return best, best_n


def test_majority_examples():
    a, b = ("1",), ("2",)
    assert majority_answer([a, a, a, b]) == (a, 3)
    assert majority_answer([b, b, a, a]) == (a, 2)
    answers = [("5",)] * 5 + [("3",)] * 2 + [UNPARSEABLE]
    assert majority_answer(answers) == (("5",), 5)
    assert majority_answer(answers) == brute_majority(answers)


def test_unparseable_only_wins_strictly():
    assert majority_answer([UNPARSEABLE, UNPARSEABLE, ("9",), ("9",)]) == (("9",), 2)
    assert majority_answer([UNPARSEABLE, UNPARSEABLE, ("9",)]) == (UNPARSEABLE, 2)
    with pytest.raises(ValueError):
        majority_answer([])


def test_agreement_examples():
    a, b, c = ("1",), ("2",), ("3",)
    assert agreement_ratio([a] * 4) == 1.0
    assert agreement_ratio([(str(i),) for i in range(8)]) == 0.125
    assert agreement_ratio([a] * 5 + [b] * 2 + [c]) == 0.625


@given(st.lists(answer_st, min_size=1, max_size=16), st.randoms())
@settings(max_examples=300, deadline=None)
def test_consensus_laws(answers, rnd):
    rep = ConsensusReport.from_answers("x", answers)
    assert (rep.a_maj, rep.majority_count) == brute_majority(answers)
    assert sum(rep.histogram.values()) == len(answers)
    assert rep.histogram == dict(Counter(answers))
    assert 1 / len(answers) <= rep.c <= 1
    assert abs(rep.c * len(answers) - round(rep.c * len(answers))) < 1e-9
    shuffled = list(answers)
    rnd.shuffle(shuffled)
    other = ConsensusReport.from_answers("x", shuffled)
    assert (other.a_maj, other.c) == (rep.a_maj, rep.c)


def _reports(cs):
    return [ConsensusReport("p%03d" % i, {}, ("0",), 0, c, 8) for i, c in enumerate(cs)]


def test_partition_boundary_and_all_easy():
    part = partition(_reports([0.45, 0.44]), 0.45, 0)
    assert part.easy == ("p000",) and part.hard == ("p001",)
    assert partition(_reports([1.0] * 5), 0.45, 3).hard == ()
    with pytest.raises(ValueError):
        partition(_reports([0.5]) * 2, 0.45, 0)
    with pytest.raises(ValueError):
        partition(_reports([0.5]), 1.0, 0)


@given(st.lists(st.integers(1, 8), min_size=1, max_size=40), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
@settings(max_examples=200, deadline=None)
def test_partition_laws(counts, rho1, rho2):
    reps = _reports([k / 8 for k in counts])
    part = partition(reps, rho1, 0)
    ids = {r.prompt_id for r in reps}
    assert set(part.easy).isdisjoint(part.hard)
    assert set(part.easy) | set(part.hard) == ids
    assert list(part.easy) == sorted(part.easy) and list(part.hard) == sorted(part.hard)
    for r in reps:
        assert part.route_of(r.prompt_id) == ("easy" if r.c >= rho1 else "hard")
    lo, hi = sorted([rho1, rho2])
    assert set(partition(reps, hi, 0).easy) <= set(partition(reps, lo, 0).easy)


def test_migrations():
    a = partition(_reports([0.9, 0.1, 0.9]), 0.45, 0)
    b = partition(_reports([0.1, 0.9, 0.9]), 0.45, 12)
    assert migrations(None, a) == {"easy_to_hard": 0, "hard_to_easy": 0}
    assert migrations(a, b) == {"easy_to_hard": 1, "hard_to_easy": 1}


def _group_with_mean_lp(raws, mean_lps):
    lps = [m * len(r) for m, r in zip(mean_lps, raws)]
    return make_group(V, PROMPT, raws, logprobs=lps)


def test_pseudo_label_examples():
    good = ("+", "4", "7", "=>", "7", "<eos>")
    bad = ("+", "4", "8", "=>", "8", "<eos>")
    g = _group_with_mean_lp([good, bad], [-2.0, -0.1])
    rep = ConsensusReport.from_group(g)
    assert select_pseudo_label(g, rep).raw == good  # tie 1-1, "7" < "8"

    short = ("=>", "7", "<eos>")
    g = _group_with_mean_lp([good, short, bad], [-1.0, -0.5, -0.1])
    assert select_pseudo_label(g, ConsensusReport.from_group(g)).raw == short


def test_pseudo_label_tie_takes_lowest_index_and_matches_scan():
    rng = np.random.default_rng(3)
    for _ in range(50):
        answers = rng.choice(["7", "7", "7", "2"], size=8)
        raws = [("+", "4", a, "=>", a, "<eos>") if rng.random() < 0.5 else ("=>", a, "<eos>") for a in answers]
        g = _group_with_mean_lp(raws, rng.choice([-1.0, -0.5, -0.25], size=8))
        rep = ConsensusReport.from_group(g)
        best, best_score = None, -np.inf
        for i, c in enumerate(g.completions):
            if c.answer == rep.a_maj and g.logprobs[i] / len(c.raw) > best_score:
                best, best_score = i, g.logprobs[i] / len(c.raw)
        assert select_pseudo_label(g, rep) is g.completions[best]
