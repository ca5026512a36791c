import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embodied_ipo.env import Difficulty, TaskType, generate_task, kind_of, reset, step
from embodied_ipo.exceptions import ChoiceOutOfVocabulary
from embodied_ipo.policy import (
    CHOICE_VOCAB,
    FEATURE_DIM,
    N_VERBS,
    VERB_IDS,
    ChoiceContext,
    ChoiceDistribution,
    PolicyParams,
    _sample_index,
    choice_distributions,
    featurize,
    grad_kl_step,
    grad_log_prob,
    kl_step,
    load_params,
    log_prob,
    sample_response,
    save_params,
)
from embodied_ipo.react import StepResponse, Trajectory
from embodied_ipo.rollout import replica_rng, run_replica


def random_params(seed, scale=0.7):
    rng = np.random.default_rng(seed)
    return PolicyParams(rng.normal(scale=scale, size=(FEATURE_DIM, CHOICE_VOCAB)))


def random_case(seed):
    """A sampled trajectory plus one of its steps and the step's prefix."""
    rng = np.random.default_rng(seed)
    tt = list(TaskType)[seed % 6]
    diff = list(Difficulty)[(seed // 6) % 2]
    spec, _ = generate_task(int(rng.integers(0, 500)), tt, diff)
    traj = run_replica(random_params(seed + 1000, 0.3), spec, 30, replica_rng(seed, 0))
    t = int(rng.integers(0, len(traj)))
    return traj, t


def test_featurize_is_deterministic_and_sized():
    traj, _ = random_case(3)
    a = featurize(traj)
    b = featurize(traj)
    assert a.shape == (FEATURE_DIM,)
    assert np.array_equal(a, b)


def test_feature_dim_matches_params_for_all_tasks():
    params = PolicyParams.zeros()
    for seed in range(30):
        for tt in TaskType:
            for diff in Difficulty:
                spec, _ = generate_task(seed, tt, diff)
                traj = run_replica(params, spec, 5, replica_rng(seed, 9))
                for t in range(len(traj) + 1):
                    x = featurize(traj.prefix(t))
                    assert x.shape == (params.feature_dim,)
                    assert set(np.unique(x)) <= {0.0, 1.0}


def _twin_worlds():
    for seed in range(200):
        spec, state = generate_task(seed, TaskType.PICK, Difficulty.NORMAL)
        room = state.room_of(state.agent_location)
        remote = [r for r, v in state.receptacles.items() if v.openable and v.room != room]
        movable = [(r, o) for r in remote for o in state.receptacles[r].contents if kind_of(o) != spec.goal_kind]
        if len(remote) >= 2 and movable:
            src, obj = movable[0]
            dst = next(r for r in remote if r != src)
            recs = dict(state.receptacles)
            recs[src] = replace(recs[src], contents=tuple(o for o in recs[src].contents if o != obj))
            recs[dst] = replace(recs[dst], contents=tuple(sorted(recs[dst].contents + (obj,))))
            return spec, state, replace(state, receptacles=recs)
    raise AssertionError("no twin found")


def test_features_ignore_hidden_state():
    spec, state, twin = _twin_worlds()
    params = random_params(5, 0.3)
    base = run_replica(params, spec, 8, replica_rng(1, 1))
    from embodied_ipo.env import initial_observation

    trajs = []
    for world in (state, twin):
        traj = Trajectory(spec, initial_observation(world, spec))
        s = world
        for turn in base.turns:
            s, obs, done = step(s, turn.response.parsed, spec)
            traj.append(turn.response, obs)
            if done:
                break
        trajs.append(traj)
    assert [t.observation.text for t in trajs[0].turns] == [t.observation.text for t in trajs[1].turns]
    for t in range(len(trajs[0]) + 1):
        assert np.array_equal(featurize(trajs[0].prefix(t)), featurize(trajs[1].prefix(t)))


def test_uniform_verb_log_probability():
    spec, _ = generate_task(1, TaskType.PICK)
    state, obs = reset(spec)
    traj = Trajectory(spec, obs)
    r = sample_response(PolicyParams.zeros(), traj, spec, np.random.default_rng(0))
    assert r.token_log_probs[1] == pytest.approx(math.log(1 / 11), abs=1e-15)
    assert N_VERBS == 11


def test_sampling_is_reproducible():
    traj, t = random_case(4)
    params = random_params(8)
    prefix = traj.prefix(t)
    a = sample_response(params, prefix, rng=np.random.default_rng(42))
    b = sample_response(params, prefix, rng=np.random.default_rng(42))
    assert a == b


def test_sample_frequencies_match_distribution():
    traj, t = random_case(6)
    params = random_params(2, 0.5)
    prefix = traj.prefix(t)
    draws = 100_000
    rng = np.random.default_rng(123)
    first = sample_response(params, prefix, rng=np.random.default_rng(0))
    verb_dist = choice_distributions(params, prefix, first)[1]
    counts = np.zeros(N_VERBS)
    # verb choice, conditioned on a fixed thought, through the policy's sampler
    ctx = first.contexts[1]
    for _ in range(draws):
        counts[_sample_index(verb_dist.probabilities, rng, False)] += 1
    p = verb_dist.probabilities
    se = np.sqrt(p * (1 - p) / draws)
    assert np.all(np.abs(counts / draws - p) <= 3 * se + 1e-12)
    assert ctx.candidate_ids == VERB_IDS


def test_sample_response_marginal_over_thoughts():
    traj, t = random_case(10)
    params = random_params(11, 0.5)
    prefix = traj.prefix(t)
    rng = np.random.default_rng(5)
    draws = 100_000
    first = sample_response(params, prefix, rng=np.random.default_rng(0))
    thought_dist = choice_distributions(params, prefix, first)[0]
    counts = np.zeros(len(thought_dist.probabilities))
    for _ in range(draws):
        counts[_sample_index(thought_dist.probabilities, rng, False)] += 1
    p = thought_dist.probabilities
    se = np.sqrt(p * (1 - p) / draws)
    assert np.all(np.abs(counts / draws - p) <= 3 * se + 1e-12)
    # end-to-end sampler on a smaller budget
    n = 4000
    hits = np.zeros_like(p)
    for i in range(n):
        r = sample_response(params, prefix, rng=np.random.default_rng(10_000 + i))
        hits[r.choices[0]] += 1
    assert np.all(np.abs(hits / n - p) <= 4 * np.sqrt(p * (1 - p) / n) + 1e-12)


def test_log_prob_reproduces_recorded_values():
    for seed in range(20):
        traj, _ = random_case(seed)
        params = random_params(seed + 1000, 0.3)
        for t, turn in enumerate(traj.turns):
            lp = log_prob(params, traj.prefix(t), turn.response, recompute=True)
            assert abs(lp - turn.response.total_log_prob) <= 1e-12
            assert lp <= 0.0
            other = log_prob(random_params(seed), traj.prefix(t), turn.response, recompute=True)
            assert other <= 0.0


def test_conditioning_locality():
    traj_a, _ = random_case(12)
    traj_b = run_replica(random_params(1012, 0.3), traj_a.spec, 30, replica_rng(999, 0))
    keep = max(1, len(traj_a) // 2)
    # same first turns, foreign continuation
    mixed = Trajectory(traj_a.spec, traj_a.initial_observation, list(traj_a.turns[:keep]) + list(traj_b.turns))
    theta = random_params(77)
    for t in range(keep):
        r = traj_a.turns[t].response
        assert log_prob(theta, mixed.prefix(t), r, recompute=True) == log_prob(theta, traj_a.prefix(t), r, recompute=True)


def test_ratio_identity():
    traj, t = random_case(13)
    params = random_params(3)
    r = traj.turns[t].response
    lp = log_prob(params, traj.prefix(t), r)
    assert math.exp(lp - lp) == 1.0


def _fd_grad(fn, params, coords, h=1e-5):
    w = params.weights
    out = np.zeros(len(coords))
    for k, (i, j) in enumerate(coords):
        up = w.copy()
        up[i, j] += h
        dn = w.copy()
        dn[i, j] -= h
        out[k] = (fn(PolicyParams(up)) - fn(PolicyParams(dn))) / (2 * h)
    return out


def _coords_for(response, rng, extra=10):
    coords = set()
    for ctx in response.contexts:
        for f in ctx.features:
            for c in ctx.candidate_ids:
                coords.add((f, c))
    for _ in range(extra):
        coords.add((int(rng.integers(FEATURE_DIM)), int(rng.integers(CHOICE_VOCAB))))
    return sorted(coords)


@pytest.mark.parametrize("seed", range(100))
def test_grad_log_prob_matches_finite_differences(seed):
    traj, t = random_case(seed)
    prefix, response = traj.prefix(t), traj.turns[t].response
    params = random_params(seed + 500, 0.5)
    coords = _coords_for(response, np.random.default_rng(seed))
    analytic = grad_log_prob(params, prefix, response)
    fd = _fd_grad(lambda p: log_prob(p, prefix, response), params, coords)
    got = np.array([analytic[i, j] for i, j in coords])
    assert np.linalg.norm(got - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-12)
    mask = np.ones_like(analytic, dtype=bool)
    for i, j in coords:
        mask[i, j] = False
    assert not np.any(analytic[mask])


def test_grad_uniform_binary_choice():
    features = (0, 5, 9)
    ctx = ChoiceContext(features, (30, 31), 31)
    response = StepResponse("t", "a", None, (math.log(0.5),), math.log(0.5), (31,), contexts=(ctx,))
    g = grad_log_prob(PolicyParams.zeros(), None, response)
    assert np.allclose(g[list(features), 31], 0.5)
    assert np.allclose(g[list(features), 30], -0.5)
    assert np.linalg.norm(g[:, 31]) == pytest.approx(0.5 * np.linalg.norm(ctx.dense()))


def test_grad_rows_sum_to_zero_over_choices():
    for seed in range(10):
        traj, t = random_case(seed)
        g = grad_log_prob(random_params(seed), traj.prefix(t), traj.turns[t].response)
        assert np.allclose(g.sum(axis=1), 0.0, atol=1e-12)


def test_kl_identity_and_nonnegativity():
    for seed in range(30):
        traj, t = random_case(seed)
        prefix, response = traj.prefix(t), traj.turns[t].response
        p = random_params(seed, 1.0)
        q = random_params(seed + 1, 1.0)
        assert kl_step(p, p, prefix, response) == 0.0
        assert kl_step(p, q, prefix, response) >= 0.0


def test_kl_matches_monte_carlo():
    traj, t = random_case(21)
    prefix, response = traj.prefix(t), traj.turns[t].response
    p = random_params(1, 0.8)
    q = random_params(2, 0.8)
    rng = np.random.default_rng(0)
    draws = 1_000_000
    estimate, var = 0.0, 0.0
    for dp, dq in zip(choice_distributions(p, prefix, response), choice_distributions(q, prefix, response)):
        k = rng.choice(len(dp.probabilities), size=draws, p=dp.probabilities)
        terms = dp.log_probabilities()[k] - dq.log_probabilities()[k]
        estimate += terms.mean()
        var += terms.var() / draws
    exact = kl_step(p, q, prefix, response)
    assert abs(exact - estimate) <= 3 * math.sqrt(var)


@pytest.mark.parametrize("seed", range(20))
def test_grad_kl_matches_finite_differences(seed):
    traj, t = random_case(seed)
    prefix, response = traj.prefix(t), traj.turns[t].response
    p = random_params(seed + 7, 0.6)
    q = random_params(seed + 8, 0.6)
    coords = _coords_for(response, np.random.default_rng(seed))
    analytic = grad_kl_step(p, q, prefix, response)
    fd = _fd_grad(lambda w: kl_step(w, q, prefix, response), p, coords)
    got = np.array([analytic[i, j] for i, j in coords])
    assert np.linalg.norm(got - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40))
def test_distribution_is_normalized_and_positive(logits):
    d = ChoiceDistribution.from_logits(logits, tuple(range(len(logits))))
    assert abs(d.probabilities.sum() - 1.0) <= 1e-9
    assert np.all(d.probabilities > 0) or max(logits) - min(logits) > 700


def test_out_of_vocabulary_choice():
    traj, t = random_case(1)
    r = traj.turns[t].response
    bad = replace(r, choices=(999,) + r.choices[1:], contexts=None)
    with pytest.raises(ChoiceOutOfVocabulary):
        log_prob(PolicyParams.zeros(), traj.prefix(t), bad)
    short = replace(r, choices=r.choices[:1], contexts=None)
    with pytest.raises(ChoiceOutOfVocabulary):
        log_prob(PolicyParams.zeros(), traj.prefix(t), short)


def test_checkpoint_round_trip(tmp_path):
    params = random_params(9)
    path = tmp_path / "policy.txt"
    save_params(params, path, step_index=17)
    loaded, header = load_params(path)
    assert header == {"feature_dim": FEATURE_DIM, "choice_vocab": CHOICE_VOCAB, "step_index": 17}
    assert np.array_equal(loaded.weights, params.weights)
    traj, t = random_case(2)
    r = traj.turns[t].response
    assert log_prob(loaded, traj.prefix(t), r) == log_prob(params, traj.prefix(t), r)


def test_params_are_immutable():
    p = PolicyParams.zeros()
    with pytest.raises(ValueError):
        p.weights[0, 0] = 1.0
