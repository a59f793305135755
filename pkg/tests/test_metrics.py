import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from recguard.data import InteractionSet, SplitSet
from recguard.metrics import (ExperimentReport, aggregate, hr_target, hr_test, item_ranks,
                              observed_matrix, rank_shift, robustness_improvement)
from recguard.mf import FactorModel, TrainConfig, init_model


def brute_rank(scores, seen, item):
    # position of item in the fully sorted list of unseen items
    order = sorted((i for i in range(len(scores)) if i not in seen), key=lambda i: (-scores[i], i))
    return order.index(item) if item in order else -1


def random_instance(seed, n_users=6, n_items=8, d=3, rounding=None):
    rng = np.random.default_rng(seed)
    P, Q = rng.normal(size=(n_users, d)), rng.normal(size=(n_items, d))
    if rounding is not None:
        P, Q = np.round(P, rounding), np.round(Q, rounding)
    mask = rng.random((n_users, n_items)) < 0.3
    users, items = np.nonzero(mask)
    data = InteractionSet(users, items, np.full(len(users), 0.6), n_users, n_items)
    return FactorModel(P, Q), data


@given(seed=st.integers(0, 10**6), rounding=st.sampled_from([None, 0]))
def test_item_ranks_match_enumeration(seed, rounding):
    model, data = random_instance(seed, rounding=rounding)
    obs = observed_matrix(data)
    seen = [set(data.items[data.users == u].tolist()) for u in range(6)]
    users = np.repeat(np.arange(6), 8)
    items = np.tile(np.arange(8), 6)
    got = item_ranks(model, users, items, obs)
    scores = model.scores()
    want = [brute_rank(scores[u], seen[u], i) for u, i in zip(users, items)]
    assert got.tolist() == want


def brute_hr_target(model, target, users, seen, k):
    scores = model.scores()
    hits = 0
    for u in users:
        r = brute_rank(scores[u], seen[u], target)
        hits += 0 <= r < k
    return hits / len(users)


@pytest.mark.parametrize("seed", range(10))
def test_hr_target_and_rank_shift_oracles(seed):
    model, data = random_instance(seed)
    after, _ = random_instance(seed + 100)
    obs = observed_matrix(data)
    seen = [set(data.items[data.users == u].tolist()) for u in range(6)]
    users = np.arange(6)
    for k in (1, 3, 8):
        for t in range(8):
            assert abs(hr_target(model, t, users, obs, k) - brute_hr_target(model, t, users, seen, k)) <= 1e-12
    t = 5
    b, a = model.scores(), after.scores()
    want = [brute_rank(b[u], seen[u], t) - brute_rank(a[u], seen[u], t)
            for u in users if t not in seen[u]]
    got = rank_shift(model, after, t, users, obs)
    assert got.tolist() == want
    mean_want = sum(want) / len(want) if want else math.nan
    if want:
        assert abs(got.mean() - mean_want) <= 1e-12


def test_hr_target_perfect_item():
    P = np.ones((4, 1))
    Q = np.array([[0.1], [0.2], [1.0], [0.3]])
    model = FactorModel(P, Q)
    obs = observed_matrix(InteractionSet([], [], [], 4, 4))
    assert hr_target(model, 2, np.arange(4), obs, k=1) == 1.0


def test_hr_target_counts_consumers_as_misses():
    model = FactorModel(np.ones((2, 1)), np.array([[1.0], [0.5]]))
    obs = observed_matrix(InteractionSet([0], [0], [1.0], 2, 2))
    assert hr_target(model, 0, np.arange(2), obs, k=1) == 0.5
    with pytest.raises(ValueError):
        hr_target(model, 0, np.array([], dtype=int), obs)


def split_with_test(test_items, n_items, train_pairs=()):
    n = len(test_items)
    tu = [p[0] for p in train_pairs]
    ti = [p[1] for p in train_pairs]
    train = InteractionSet(tu, ti, [0.6] * len(tu), n, n_items)
    val = InteractionSet([], [], [], n, n_items)
    test = InteractionSet(np.arange(n), test_items, [0.6] * n, n, n_items)
    return SplitSet(train, val, test)


def test_hr_test_top_ranked_item():
    Q = np.array([[0.1], [0.9], [0.2]])
    model = FactorModel(np.ones((3, 1)), Q)
    s = split_with_test([1, 1, 1], 3)
    assert hr_test(model, s, k=1) == 1.0


def test_hr_test_excludes_consumed_items():
    # item 0 outranks the test item but has been consumed, so the test item is top-1
    Q = np.array([[0.9], [0.5], [0.1]])
    model = FactorModel(np.ones((2, 1)), Q)
    s = split_with_test([1, 1], 3, train_pairs=[(0, 0), (1, 0)])
    assert hr_test(model, s, k=1) == 1.0
    # sentinel: a test item that is also in train would never be ranked
    bad = split_with_test([0, 0], 3, train_pairs=[(0, 0), (1, 0)])
    assert hr_test(model, bad, k=3) == 0.0


def test_hr_test_empty_split():
    with pytest.raises(ValueError):
        hr_test(FactorModel(np.ones((1, 1)), np.ones((2, 1))), split_with_test([], 2))


def test_hr_test_random_model_near_uniform():
    # an untrained model ranks the held-out item uniformly: expectation k / candidates
    n_users, n_items, k = 3000, 200, 10
    cfg = TrainConfig(d=16, dtype="float64")
    model = init_model(n_users, n_items, cfg, seed=0)
    rng = np.random.default_rng(1)
    s = split_with_test(rng.integers(0, n_items, n_users), n_items)
    expected = k / n_items
    sd = math.sqrt(expected * (1 - expected) / n_users)
    assert abs(hr_test(model, s, k) - expected) < 4 * sd


@given(seed=st.integers(0, 10**6))
def test_hr_monotone_in_k(seed):
    model, data = random_instance(seed)
    obs = observed_matrix(data)
    values = [hr_target(model, 3, np.arange(6), obs, k) for k in range(1, 9)]
    assert all(0 <= v <= 1 for v in values)
    assert all(a <= b for a, b in zip(values, values[1:]))


@given(seed=st.integers(0, 10**6), t=st.integers(0, 7))
def test_rank_shift_self_is_zero(seed, t):
    model, data = random_instance(seed)
    assert not rank_shift(model, model, t, np.arange(6), observed_matrix(data)).any()


def test_rank_shift_promotion_sign():
    before = FactorModel(np.ones((3, 1)), np.array([[0.9], [0.8], [0.1]]))
    after = FactorModel(np.ones((3, 1)), np.array([[0.9], [0.8], [2.0]]))
    obs = observed_matrix(InteractionSet([], [], [], 3, 3))
    assert (rank_shift(before, after, 2, np.arange(3), obs) > 0).all()


@pytest.mark.parametrize("args, want", [((0.2, 0.6, 0.2), 1.0), ((0.2, 0.6, 0.6), 0.0),
                                        ((0.2, 0.6, 0.4), 0.5)])
def test_ri_examples(args, want):
    assert robustness_improvement(*args) == want


def test_ri_undefined():
    assert robustness_improvement(0.3, 0.3, 0.1) is None


@given(o=st.floats(0, 1), a=st.floats(0, 1), d=st.floats(0, 1))
def test_ri_boundary_identities(o, a, d):
    if a == o:
        assert robustness_improvement(o, a, d) is None
        return
    assert robustness_improvement(o, a, o) == 1.0
    assert robustness_improvement(o, a, a) == 0.0


def report(**kw):
    return ExperimentReport(**kw)


def test_aggregate_examples():
    one = report(hr_attack_target=0.4, ri=0.5, rank_shift_samples=[1, 2])
    single = aggregate([one])
    assert single.hr_attack_target == 0.4 and single.std["hr_attack_target"] == 0.0
    assert single.ri == 0.5 and single.ri_excluded == 0

    two = aggregate([report(hr_attack_target=0.2), report(hr_attack_target=0.4)])
    assert two.hr_attack_target == pytest.approx(0.3)
    assert two.std["hr_attack_target"] == pytest.approx(np.std([0.2, 0.4], ddof=1))

    three = aggregate([report(ri=0.2), report(ri=None), report(ri=0.6)])
    assert three.ri == pytest.approx(0.4) and three.ri_excluded == 1
    assert three.n_seeds == 3


def test_aggregate_skips_failed_cells():
    ok = report(hr_attack_target=0.2)
    bad = report(failed="boom")
    assert aggregate([ok, bad]).n_seeds == 1
    with pytest.raises(ValueError):
        aggregate([bad])
