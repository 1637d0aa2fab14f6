import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disctt.policy import (
    FeatureMap,
    PolicyParams,
    grad_logprob,
    load_checkpoint,
    logprob,
    next_dist,
    sample_completions,
    save_checkpoint,
)
from disctt.tasks import UNPARSEABLE, Vocabulary, gen_dataset, oracle_trace

from conftest import central_diff, rel_err, solver_params

V11 = Vocabulary.for_modulus(11)
PROMPT = gen_dataset(0, 1, (3, 3), 11)[0].prompt


def random_params(rng, vocab=V11, order=2, aligned=True, bias=True, scale=1.0):
    p = PolicyParams.zeros(vocab, order, aligned, bias)
    return p.with_theta(rng.normal(scale=scale, size=p.theta.size))


def test_param_layout():
    p = PolicyParams.zeros(V11)
    assert p.theta.size == p.features.feature_count * p.vocab_size
    assert p.feature_order == 2 and p.vocab_size == len(V11)
    with pytest.raises(ValueError):
        p.with_theta(np.full(p.theta.size, np.nan))
    with pytest.raises(ValueError):
        p.with_theta(np.zeros(3))
    assert not p.theta.flags.writeable


def test_zero_theta_is_uniform():
    d = next_dist(PolicyParams.zeros(V11), PROMPT, ["+", "3"], 0.9)
    np.testing.assert_allclose(d.probs, 1 / len(V11), rtol=0, atol=1e-15)


def test_high_temperature_flattens():
    p = random_params(np.random.default_rng(0), scale=5.0)
    d = next_dist(p, PROMPT, ["*"], 1e6)
    assert d.probs.max() - d.probs.min() < 1e-4


def test_single_weight_softmax():
    p = PolicyParams.zeros(V11)
    W = p.weights.copy()
    k = V11.index("7")
    W[0, k] = 2.0  # bias feature is active everywhere
    d = next_dist(p.with_theta(W), PROMPT, [], 1.0)
    expected = math.exp(2) / (math.exp(2) + len(V11) - 1)
    assert abs(d.probs[k] - expected) < 1e-12


@given(seed=st.integers(0, 2**32 - 1), temp=st.floats(0.05, 20.0), plen=st.integers(0, 12))
@settings(max_examples=100, deadline=None)
def test_normalization(seed, temp, plen):
    rng = np.random.default_rng(seed)
    p = random_params(rng, scale=3.0)
    prefix = rng.choice(V11.tokens, size=plen)
    d = next_dist(p, PROMPT, prefix, temp)
    assert np.all(d.probs >= 0)
    assert abs(d.probs.sum() - 1) < 1e-9


def test_sampling_determinism_and_shapes():
    p = random_params(np.random.default_rng(1))
    a = sample_completions(p, PROMPT, 1, 0.9, seed=123)
    b = sample_completions(p, PROMPT, 1, 0.9, seed=123)
    assert a.completions == b.completions
    np.testing.assert_array_equal(a.logprobs, b.logprobs)

    g = sample_completions(p, PROMPT, 8, 0.9, seed=7)
    assert len(g.completions) == 8
    for comp, dists in zip(g.completions, g.per_position_dists):
        assert len(dists) == len(comp.trace)


def test_sampling_truncates_at_max_len():
    p = PolicyParams.zeros(V11)
    g = sample_completions(p, PROMPT, 16, 0.9, max_len=5, seed=0)
    assert all(len(c.raw) <= 5 for c in g.completions)
    for c in g.completions:
        if V11.eos not in c.raw:
            assert c.answer is UNPARSEABLE


def test_degenerate_eos_policy():
    p = PolicyParams.zeros(V11)
    W = p.weights.copy()
    W[0, V11.eos_id] = 40.0
    g = sample_completions(p.with_theta(W), PROMPT, 8, 0.9, seed=0)
    assert next_dist(p.with_theta(W), PROMPT, [], 0.9).probs[V11.eos_id] >= 1 - 1e-9
    for c in g.completions:
        assert c.trace == () and c.answer is UNPARSEABLE


def test_group_logprobs_consistent_with_stored_dists():
    p = random_params(np.random.default_rng(2))
    g = sample_completions(p, PROMPT, 8, 0.9, seed=3)
    for i, comp in enumerate(g.completions):
        ids = V11.encode(comp.raw)
        from_dists = np.sum(np.log(g.dists[i][np.arange(len(ids)), ids]))
        assert abs(from_dists - g.logprobs[i]) < 1e-9
        assert abs(logprob(p, PROMPT, comp, 0.9) - g.logprobs[i]) < 1e-9


def test_sampled_features_match_rescoring():
    p = random_params(np.random.default_rng(4))
    g = sample_completions(p, PROMPT, 6, 0.9, seed=5)
    fm = p.features
    for comp, feats in zip(g.completions, g.features):
        np.testing.assert_array_equal(feats, fm.sequence_features(V11.encode(PROMPT), V11.encode(comp.raw)))


def test_logprob_uniform_and_empty():
    p = PolicyParams.zeros(V11)
    raw = ["+", "3", "4", "=>", "4", "<eos>"]
    assert abs(logprob(p, PROMPT, raw, 0.9) - len(raw) * math.log(1 / len(V11))) < 1e-12
    assert logprob(p, PROMPT, [], 0.9) == 0.0


def test_logprob_matches_positionwise_oracle():
    rng = np.random.default_rng(6)
    p = random_params(rng, scale=2.0)
    for _ in range(5):
        raw = list(rng.choice(V11.tokens, size=rng.integers(1, 15)))
        expected = sum(
            math.log(next_dist(p, PROMPT, raw[:t], 0.7).probs[V11.index(raw[t])]) for t in range(len(raw))
        )
        assert abs(logprob(p, PROMPT, raw, 0.7) - expected) < 1e-9
        assert logprob(p, PROMPT, raw, 0.7) <= 0


def test_grad_empty_and_uniform_identity():
    p = PolicyParams.zeros(V11)
    assert not np.any(grad_logprob(p, PROMPT, [], 1.0))
    g = grad_logprob(p, PROMPT, ["*"], 1.0).reshape(p.weights.shape)
    feats = p.features.sequence_features(V11.encode(PROMPT), V11.encode(["*"]))[0]
    k = V11.index("*")
    for f in feats:
        assert abs(g[f, k] - (1 - 1 / len(V11))) < 1e-12
        others = np.delete(g[f], k)
        np.testing.assert_allclose(others, -1 / len(V11), atol=1e-12)


def _fd_check(p, prompt, raw, temperature, coords):
    f = lambda th: logprob(p.with_theta(th), prompt, raw, temperature)
    numeric = central_diff(f, p.theta.copy(), coords)
    analytic = grad_logprob(p, prompt, raw, temperature)[coords]
    return rel_err(analytic, numeric)


@pytest.mark.parametrize("seed", range(10))
def test_grad_matches_finite_differences_small(seed):
    # modulus-2 vocabulary, plain bigram features: 13 x 11 = 143 parameters
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.for_modulus(2)
    p = random_params(rng, vocab, order=2, aligned=False)
    assert p.theta.size < 200
    prompt = ("1", "+", "1", "mod", "2", "<q>")
    raw = list(rng.choice(vocab.tokens, size=rng.integers(1, 12)))
    assert _fd_check(p, prompt, raw, float(rng.uniform(0.5, 1.5)), np.arange(p.theta.size)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_grad_matches_finite_differences_aligned(seed):
    rng = np.random.default_rng(100 + seed)
    p = random_params(rng, scale=0.5)
    raw = list(oracle_trace(PROMPT))
    g = grad_logprob(p, PROMPT, raw, 0.9)
    coords = np.union1d(np.flatnonzero(g), rng.choice(p.theta.size, 100, replace=False))
    assert _fd_check(p, PROMPT, raw, 0.9, coords) < 1e-4


def test_solver_policy_is_representable():
    p = solver_params(V11, 11)
    for prob in gen_dataset(9, 20, (1, 4), 11):
        g = sample_completions(p, prob.prompt, 4, 0.9, seed=0)
        assert all(c.answer == prob.ground_truth for c in g.completions)
        assert all(c.raw == oracle_trace(prob.prompt) for c in g.completions)


def test_feature_map_variants():
    assert FeatureMap(V11, 1, aligned=True, bias=False).n_active == 1
    assert FeatureMap(V11, 3, aligned=False).n_active == 2
    with pytest.raises(ValueError):
        FeatureMap(V11, 1, aligned=False, bias=False)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = random_params(np.random.default_rng(8), scale=3.0)
    path = tmp_path / "ck.json"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.theta.tobytes() == p.theta.tobytes()
    assert q.features == p.features
    import json

    header = json.loads(path.read_text())["header"]
    assert header["feature_order"] == 2 and header["vocab_size"] == len(V11)
