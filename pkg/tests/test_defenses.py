import numpy as np
import pytest
from hypothesis import given, strategies as st

from recguard.data import InteractionSet, split
from recguard.defenses import (TcdConfig, TcdEnsemble, adversarial_perturbation, adversarial_train,
                               pseudo_labels_for, random_adversarial_train, tcd_train,
                               truncated_noise, unlabeled_pairs)
from recguard.mf import DivergenceError, FactorModel, TrainConfig, init_model, project, train

TINY = TrainConfig(d=8, batch_size=128, epochs=6, learning_rate=0.01, dtype="float64")


def models_from(seed, n_users=5, n_items=7, d=2):
    rng = np.random.default_rng(seed)
    return [FactorModel(np.abs(rng.normal(0.5, 0.3, (n_users, d))), np.abs(rng.normal(0.5, 0.3, (n_items, d))))
            for _ in range(3)]


def all_pairs(n_users, n_items):
    u, i = np.divmod(np.arange(n_users * n_items), n_items)
    return u, i


def test_identical_models_agree_everywhere():
    a, b, c = models_from(0)
    labels = pseudo_labels_for(0, [a, b, b], all_pairs(5, 7), 1.0, seed=0)
    assert len(labels) == 35
    assert np.allclose(labels.ratings, project(b.predict_many(labels.users, labels.items)))


def test_disjoint_levels_give_nothing():
    low = FactorModel(np.full((3, 1), 0.2), np.ones((4, 1)))
    high = FactorModel(np.full((3, 1), 0.9), np.ones((4, 1)))
    assert len(pseudo_labels_for(0, [low, low, high], all_pairs(3, 4), 1.0, seed=0)) == 0


def test_ratio_floor():
    m = FactorModel(np.full((100, 1), 0.5), np.ones((10, 1)))
    labels = pseudo_labels_for(2, [m, m, m], all_pairs(100, 10), 0.5, seed=1)
    assert len(labels) == 500
    again = pseudo_labels_for(2, [m, m, m], all_pairs(100, 10), 0.5, seed=1)
    assert np.array_equal(labels.keys(), again.keys())


def test_bad_index():
    with pytest.raises(ValueError):
        pseudo_labels_for(3, models_from(0), all_pairs(5, 7), 1.0, seed=0)


def brute_agreement(j, models, pairs):
    a, b = models[(j + 1) % 3], models[(j + 2) % 3]
    out = []
    for u, i in zip(*pairs):
        la = project(min(max(float(a.user_factors[u] @ a.item_factors[i]), 1e-6), 1.0))
        lb = project(min(max(float(b.user_factors[u] @ b.item_factors[i]), 1e-6), 1.0))
        if la == lb:
            out.append((u, i, la))
    return out


@given(seed=st.integers(0, 10**6), j=st.integers(0, 2))
def test_agreement_matches_enumeration_and_is_symmetric(seed, j):
    models = models_from(seed)
    pairs = all_pairs(5, 7)
    got = pseudo_labels_for(j, models, pairs, 1.0, seed=0)
    assert list(zip(got.users.tolist(), got.items.tolist(), got.ratings.tolist())) == \
        [(int(u), int(i), r) for u, i, r in brute_agreement(j, models, pairs)]
    swapped = list(models)
    swapped[(j + 1) % 3], swapped[(j + 2) % 3] = swapped[(j + 2) % 3], swapped[(j + 1) % 3]
    again = pseudo_labels_for(j, swapped, pairs, 1.0, seed=0)
    assert np.array_equal(got.keys(), again.keys()) and np.array_equal(got.ratings, again.ratings)


def test_unlabeled_pairs_complement(small_data):
    u, i = unlabeled_pairs(small_data, None, np.random.default_rng(0))
    keys = u * small_data.n_items + i
    assert not np.isin(keys, small_data.keys()).any()
    assert len(keys) + len(small_data) == small_data.n_users * small_data.n_items
    capped = unlabeled_pairs(small_data, 50, np.random.default_rng(0))
    assert len(capped[0]) == 50
    assert np.all(np.diff(capped[0] * small_data.n_items + capped[1]) > 0)


def test_pseudo_labels_only_levels_and_unlabeled(small_data):
    s = split(small_data, 0)
    models = [init_model(small_data.n_users, small_data.n_items, TINY, seed=k) for k in range(3)]
    cand = unlabeled_pairs(s.train, None, np.random.default_rng(0))
    labels = pseudo_labels_for(1, models, cand, 1.0, seed=0)
    assert np.isin(np.round(labels.ratings, 10), [0.2, 0.4, 0.6, 0.8, 1.0]).all()
    assert not np.isin(labels.keys(), s.train.keys()).any()


def test_tcd_without_cotraining_is_three_plain_models(small_data):
    s = split(small_data, 0)
    cfg = TcdConfig(pretrain_epochs=TINY.epochs, train=TINY, seeds=(4, 5, 6))
    ens = tcd_train(s, cfg)
    for seed, model in zip(cfg.seeds, ens.models):
        plain, _ = train(init_model(small_data.n_users, small_data.n_items, TINY.replace(seed=seed)),
                         s.train, TINY.replace(seed=seed), select_best=False)
        assert np.array_equal(model.user_factors, plain.user_factors)
    assert ens.model is ens.models[0]


def test_tcd_deterministic_and_changes_with_labels(small_data):
    s = split(small_data, 1)
    cfg = TcdConfig(pretrain_epochs=2, train=TINY, seeds=(0, 1, 2))
    a = tcd_train(s, cfg)
    b = tcd_train(s, cfg)
    for x, y in zip(a.models, b.models):
        assert np.array_equal(x.item_factors, y.item_factors)
    plain = tcd_train(s, TcdConfig(pretrain_epochs=TINY.epochs, train=TINY, seeds=(0, 1, 2)))
    assert not np.array_equal(a.model.item_factors, plain.model.item_factors)


def test_tcd_pseudo_label_dump(tmp_path, small_data):
    s = split(small_data, 2)
    cfg = TcdConfig(pretrain_epochs=5, train=TINY, seeds=(0, 1, 2))
    tcd_train(s, cfg, pseudo_label_dir=tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["epoch005_member0.tsv", "epoch005_member1.tsv", "epoch005_member2.tsv"]


def test_tcd_divergence_names_member(small_data, monkeypatch):
    import recguard.defenses as D

    calls = {"n": 0}
    real_train = D.train

    def flaky(model, data, config, *a, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise DivergenceError(0)
        return real_train(model, data, config, *a, **kw)

    monkeypatch.setattr(D, "train", flaky)
    with pytest.raises(DivergenceError, match="member 1"):
        tcd_train(split(small_data, 0), TcdConfig(pretrain_epochs=1, train=TINY))


def test_tcd_config_validation():
    with pytest.raises(ValueError):
        TcdConfig(pretrain_epochs=50, train=TrainConfig(epochs=40))
    with pytest.raises(ValueError):
        TcdConfig(pseudo_label_ratio=1.5)
    with pytest.raises(ValueError):
        TcdConfig(seeds=(1, 2))
    assert TcdConfig.for_dataset("ml1m").pseudo_label_ratio == 0.2
    assert TcdConfig.for_dataset("ml100k").pretrain_epochs == 4


def test_ensemble_checkpoint_roundtrip(tmp_path):
    ens = TcdEnsemble(models_from(3), designated=1)
    ens.save(tmp_path / "ens", TcdConfig(train=TINY))
    back = TcdEnsemble.load(tmp_path / "ens")
    assert back.designated == 1
    for a, b in zip(ens.models, back.models):
        assert np.array_equal(a.user_factors, b.user_factors)


def test_ensemble_shape_check():
    a, b, _ = models_from(0)
    c = FactorModel(np.ones((5, 3)), np.ones((7, 3)))
    with pytest.raises(ValueError):
        TcdEnsemble([a, b, c])


def test_adversarial_zero_epsilon_is_plain(small_data):
    s = split(small_data, 0)
    a, _ = adversarial_train(s, TINY, 0.0)
    b, _ = train(init_model(small_data.n_users, small_data.n_items, TINY), s.train, TINY,
                 validation=s.validation)
    assert np.array_equal(a.user_factors, b.user_factors)


def test_adversarial_perturbation_norm(small_data):
    model = init_model(small_data.n_users, small_data.n_items, TINY)
    users, items, ratings = small_data.users[:40], small_data.items[:40], small_data.ratings[:40]
    dP, dQ = adversarial_perturbation(0.03, 0.005)(model, users, items, ratings, None)
    for delta, idx in ((dP, users), (dQ, items)):
        rows = np.unique(idx)
        assert np.allclose(np.linalg.norm(delta[rows], axis=1), 0.03)
        untouched = np.setdiff1d(np.arange(delta.shape[0]), rows)
        assert not delta[untouched].any()


def test_adversarial_zero_gradient_rows_skipped():
    # every prediction sits above the clamp, so the only gradient is the tiny L2 term; switch it off
    model = FactorModel(np.full((2, 1), 2.0), np.full((2, 1), 2.0))
    dP, dQ = adversarial_perturbation(0.03, 0.0)(model, np.array([0, 1]), np.array([0, 1]),
                                                 np.array([0.2, 0.2]), None)
    assert not dP.any() and not dQ.any()


def test_epsilon_cap(small_data):
    with pytest.raises(ValueError):
        adversarial_train(split(small_data, 0), TINY, 0.05)
    with pytest.raises(ValueError):
        random_adversarial_train(split(small_data, 0), TINY, 0.01, cap=0.04)


def test_random_noise_zero_sigma_is_plain(small_data):
    s = split(small_data, 0)
    a, _ = random_adversarial_train(s, TINY, sigma=0.0)
    b, _ = train(init_model(small_data.n_users, small_data.n_items, TINY), s.train, TINY,
                 validation=s.validation)
    assert np.array_equal(a.item_factors, b.item_factors)


def test_truncated_noise_statistics():
    x = truncated_noise(np.random.default_rng(0), (200, 500), 0.01, 0.03)
    assert np.abs(x).max() <= 0.03
    # truncation at three standard deviations shrinks the std by about 1.4%
    assert abs(x.std() - 0.01) < 0.0005
    wide = truncated_noise(np.random.default_rng(1), (200, 500), 0.01, 1.0)
    assert abs(wide.std() - 0.01) < 0.0002


def test_random_adversarial_runs(small_data):
    model, hist = random_adversarial_train(split(small_data, 0), TINY)
    assert np.isfinite(model.user_factors).all() and len(hist.val_mse) == TINY.epochs
