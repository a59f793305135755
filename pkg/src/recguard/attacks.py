"""Push-attack generators against the MF recommender.

Every generator returns a :class:`FakeProfileSet`: ``n_fake`` profiles, each
holding the target item at the top rating plus exactly ``fillers_per_user``
filler items rated on the five discrete levels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import LEVELS, InteractionSet, RatingStats, concat, rating_stats
from .metrics import observed_matrix
from .mf import (AdamState, FactorModel, TrainConfig, TrainHistory, epoch_rng, init_model, project,
                 topk_rows, train)

MAX_FAKE_SHARE = 0.2
MAX_FILLER_SHARE = 0.5


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class AttackBudget:
    n_fake: int
    fillers_per_user: int
    target: int
    knowledge_fraction: float = 0.4
    kappa: float = 0.2
    topk: int = 50
    max_fake_share: float = MAX_FAKE_SHARE
    max_filler_share: float = MAX_FILLER_SHARE

    @classmethod
    def for_dataset(cls, data: InteractionSet, target: int, attack_size: float = 0.03,
                    fillers: int | None = None, **kw) -> "AttackBudget":
        """Defaults: ``ceil(attack_size * n_users)`` fake users, mean profile length fillers."""
        n_fake = math.ceil(attack_size * data.n_users - 1e-9)
        if fillers is None:
            fillers = int(round(len(data) / data.n_users))
        return cls(n_fake=n_fake, fillers_per_user=fillers, target=target, **kw)

    def validate(self, n_users: int, n_items: int) -> None:
        if self.n_fake <= 0:
            raise BudgetError("at least one fake user is required")
        if self.n_fake > self.max_fake_share * n_users:
            raise BudgetError(f"n_fake={self.n_fake} exceeds {self.max_fake_share:g} of {n_users} users")
        if self.fillers_per_user + 1 > n_items:
            raise BudgetError(f"{self.fillers_per_user} fillers plus the target exceed {n_items} items")
        if self.fillers_per_user > self.max_filler_share * n_items:
            raise BudgetError(f"{self.fillers_per_user} fillers exceed {self.max_filler_share:g} of {n_items} items")
        if not 0 <= self.target < n_items:
            raise BudgetError(f"target {self.target} outside [0, {n_items})")
        if self.kappa <= 0:
            raise BudgetError("kappa must be positive")


@dataclass
class FakeProfileSet:
    """Fake profiles as two ``(n_fake, fillers + 1)`` arrays; column 0 is the target."""

    items: np.ndarray
    ratings: np.ndarray
    target: int
    trace: dict = field(default_factory=dict, repr=False)

    @property
    def n_fake(self) -> int:
        return self.items.shape[0]

    @property
    def fillers_per_user(self) -> int:
        return self.items.shape[1] - 1

    def validate(self) -> None:
        if np.any(self.items[:, 0] != self.target) or np.any(self.ratings[:, 0] != 1.0):
            raise ValueError("every profile must rate the target at 1.0 in column 0")
        if not np.all(np.isin(np.round(self.ratings, 10), LEVELS)):
            raise ValueError("profile ratings must be discrete levels")
        for row in self.items:
            if len(np.unique(row)) != len(row):
                raise ValueError("duplicate item inside a profile")

    def to_interactions(self, first_user: int, n_items: int) -> InteractionSet:
        users = np.repeat(np.arange(self.n_fake) + first_user, self.items.shape[1])
        return InteractionSet(users, self.items.ravel(), self.ratings.ravel(),
                              first_user + self.n_fake, n_items)

    def save(self, path) -> Path:
        """Write ``fake_user<TAB>item<TAB>rating`` lines (0-based, normalized ratings)."""
        path = Path(path)
        with open(path, "w") as fh:
            for f in range(self.n_fake):
                for it, r in zip(self.items[f], self.ratings[f]):
                    fh.write(f"{f}\t{int(it)}\t{r:.1f}\n")
        return path

    @classmethod
    def load(cls, path, target: int | None = None) -> "FakeProfileSet":
        rows: dict[int, list] = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    f, it, r = line.split("\t")
                    rows.setdefault(int(f), []).append((int(it), float(r)))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: expected 'user<TAB>item<TAB>rating'") from None
        n = len(rows)
        width = len(rows[0])
        items = np.empty((n, width), dtype=np.int64)
        ratings = np.empty((n, width))
        for f in range(n):
            entries = rows[f]
            items[f] = [e[0] for e in entries]
            ratings[f] = [e[1] for e in entries]
        return cls(items, ratings, int(items[0, 0]) if target is None else target)


def _assemble(target: int, fillers: np.ndarray, filler_ratings: np.ndarray, **trace) -> FakeProfileSet:
    n = fillers.shape[0]
    items = np.hstack([np.full((n, 1), target, dtype=np.int64), fillers.astype(np.int64)])
    ratings = np.hstack([np.ones((n, 1)), project(filler_ratings).reshape(n, -1)])
    return FakeProfileSet(items, ratings, target, trace)


def _sample_fillers(n_items: int, budget: AttackBudget, rng: np.random.Generator) -> np.ndarray:
    pool = np.delete(np.arange(n_items), budget.target)
    return np.stack([rng.choice(pool, size=budget.fillers_per_user, replace=False)
                     for _ in range(budget.n_fake)]) if budget.fillers_per_user else \
        np.empty((budget.n_fake, 0), dtype=np.int64)


def _check(stats: RatingStats, budget: AttackBudget):
    n_items = len(stats.item_mean)
    if budget.fillers_per_user + 1 > n_items:
        raise BudgetError(f"{budget.fillers_per_user} fillers plus the target exceed {n_items} items")
    if not 0 <= budget.target < n_items:
        raise BudgetError(f"target {budget.target} outside [0, {n_items})")
    return n_items


def init_fake_profiles(stats: RatingStats, budget: AttackBudget, seed: int) -> FakeProfileSet:
    """Uniform fillers rated by sampling the empirical distribution of rating levels."""
    n_items = _check(stats, budget)
    rng = np.random.default_rng([seed, 11])
    fillers = _sample_fillers(n_items, budget, rng)
    levels = rng.choice(LEVELS, size=fillers.shape, p=stats.level_probs)
    return _assemble(budget.target, fillers, levels)


def random_attack(stats: RatingStats, budget: AttackBudget, seed: int) -> FakeProfileSet:
    """Fillers rated from a normal fitted to all ratings, then snapped to levels."""
    n_items = _check(stats, budget)
    rng = np.random.default_rng([seed, 12])
    fillers = _sample_fillers(n_items, budget, rng)
    raw = rng.normal(stats.global_mean, stats.global_std, size=fillers.shape)
    return _assemble(budget.target, fillers, raw)


def average_attack(stats: RatingStats, budget: AttackBudget, seed: int) -> FakeProfileSet:
    """Fillers rated from a normal fitted to each filler item's own ratings."""
    n_items = _check(stats, budget)
    rng = np.random.default_rng([seed, 13])
    fillers = _sample_fillers(n_items, budget, rng)
    raw = rng.normal(stats.item_mean[fillers], stats.item_std[fillers])
    return _assemble(budget.target, fillers, raw)


# ---------------------------------------------------------------------------
# attack objective


def _attack_terms(model: FactorModel, users, target, kappa, argmin_items):
    P = model.user_factors[users]
    floor = model.clamp_floor
    dot_t = P @ model.item_factors[target]
    dot_m = np.einsum("ij,ij->i", P, model.item_factors[argmin_items])
    h_t = np.clip(dot_t, floor, 1.0)
    h_m = np.clip(dot_m, floor, 1.0)
    raw = np.log(h_m) - np.log(h_t)
    per_user = np.maximum(raw, -kappa)
    return P, dot_t, dot_m, h_t, h_m, raw, per_user


def recommendation_argmin(model: FactorModel, users, target: int, k: int,
                          observed: sp.csr_matrix) -> np.ndarray:
    """Per user, the item of lowest predicted rating in the top-``k`` list (target removed).

    The list excludes the user's observed items; ties go to the lowest index.
    """
    users = np.asarray(users, dtype=np.int64)
    out = np.empty(len(users), dtype=np.int64)
    for start in range(0, len(users), 512):
        u = users[start:start + 512]
        scores = model.scores(u).astype(np.float64)
        excludes = [observed[x].indices for x in u]
        lengths = np.minimum(k, model.n_items - np.array([len(e) for e in excludes]))
        top = topk_rows(scores, int(lengths.max()), excludes)
        h = np.clip(np.take_along_axis(scores, top, axis=1), model.clamp_floor, 1.0)
        h[np.arange(top.shape[1])[None, :] >= lengths[:, None]] = np.inf
        h[top == target] = np.inf
        if np.isinf(h.min(axis=1)).any():
            raise ValueError("a user has no recommendation besides the target")
        # lowest prediction, ties to the lowest item index
        at_min = h == h.min(axis=1, keepdims=True)
        out[start:start + 512] = np.where(at_min, top, np.iinfo(np.int64).max).min(axis=1)
    return out


def attack_loss(model: FactorModel, users, target: int, kappa: float = 0.2, k: int = 50,
                observed: sp.csr_matrix | None = None) -> float:
    """Sum over users of ``max(min_{i in L_u} log h(u,i) - log h(u,t), -kappa)``.

    ``L_u`` is the user's top-``k`` list over unobserved items with the
    target removed from the minimum.
    """
    users = np.asarray(users, dtype=np.int64)
    if len(users) == 0:
        raise ValueError("attack_loss needs a non-empty user set")
    observed = _empty_observed(model) if observed is None else observed
    argmin = recommendation_argmin(model, users, target, k, observed)
    return float(_attack_terms(model, users, target, kappa, argmin)[-1].sum())


def attack_loss_grad(model: FactorModel, users, target: int, kappa: float = 0.2, k: int = 50,
                     observed: sp.csr_matrix | None = None, argmin_items=None):
    """Sub-gradient of :func:`attack_loss` as dense ``(user_grad, item_grad)``.

    Users clamped at ``-kappa`` contribute nothing; otherwise the gradient
    flows through the target and the minimizing list item only. ``argmin_items``
    may be supplied to hold the minimizer fixed.
    """
    users = np.asarray(users, dtype=np.int64)
    if len(users) == 0:
        raise ValueError("attack_loss_grad needs a non-empty user set")
    if argmin_items is None:
        observed = _empty_observed(model) if observed is None else observed
        argmin_items = recommendation_argmin(model, users, target, k, observed)
    return _grad_from_argmin(model, users, target, kappa, argmin_items)[1:]


def _grad_from_argmin(model, users, target, kappa, argmin_items):
    P, dot_t, dot_m, h_t, h_m, raw, per_user = _attack_terms(model, users, target, kappa, argmin_items)
    floor = model.clamp_floor
    live = raw > -kappa
    a_m = live * ((dot_m > floor) & (dot_m < 1.0)) / h_m
    a_t = live * ((dot_t > floor) & (dot_t < 1.0)) / h_t
    Q = model.item_factors
    gP = np.zeros_like(model.user_factors)
    gP[users] += a_m[:, None] * Q[argmin_items] - a_t[:, None] * Q[target]
    gQ = np.zeros_like(Q)
    np.add.at(gQ, argmin_items, a_m[:, None] * P)
    gQ[target] -= a_t @ P
    return float(per_user.sum()), gP, gQ


def _empty_observed(model):
    return sp.csr_matrix((model.n_users, model.n_items), dtype=bool)


class AttackObjective:
    """Attack loss as a training term: lists refreshed once per epoch.

    The training loss is a per-interaction mean, so adding the summed attack
    loss one-to-one means dividing it by the number of training interactions;
    pass that count as ``n_train``. ``weight`` multiplies on top.
    """

    def __init__(self, target: int, users, observed: sp.csr_matrix, kappa: float = 0.2,
                 k: int = 50, weight: float = 1.0, n_train: int = 1):
        self.target = target
        self.users = np.asarray(users, dtype=np.int64)
        self.observed = observed
        self.kappa = kappa
        self.k = k
        self.weight = weight
        self.set_train_size(n_train)
        self._argmin = None

    def set_train_size(self, n_train: int) -> None:
        self.scale = self.weight / n_train

    def refresh(self, model: FactorModel) -> None:
        self._argmin = recommendation_argmin(model, self.users, self.target, self.k, self.observed)

    def grad(self, model: FactorModel):
        loss, gP, gQ = _grad_from_argmin(model, self.users, self.target, self.kappa, self._argmin)
        if self.scale != 1.0:
            gP *= self.scale
            gQ *= self.scale
        return loss, gP, gQ

    def value(self, model: FactorModel) -> float:
        return attack_loss(model, self.users, self.target, self.kappa, self.k, self.observed)


# ---------------------------------------------------------------------------
# optimization-based attacks


def extract_profiles(model: FactorModel, fake_rows, budget: AttackBudget, **trace) -> FakeProfileSet:
    """Take each fake user's ``m'`` highest-predicted items (target aside) as fillers."""
    fake_rows = np.asarray(fake_rows)
    scores = model.scores(fake_rows).astype(np.float64)
    top = topk_rows(scores, budget.fillers_per_user, [np.array([budget.target])] * len(fake_rows))
    preds = np.clip(np.take_along_axis(scores, top, axis=1), model.clamp_floor, 1.0)
    return _assemble(budget.target, top, preds, **trace)


def _poisoned_surrogate(surrogate: InteractionSet, budget: AttackBudget, seed: int):
    budget.validate(surrogate.n_users, surrogate.n_items)
    stats = rating_stats(surrogate)
    init = init_fake_profiles(stats, budget, seed)
    n = surrogate.n_users
    fake = init.to_interactions(n, surrogate.n_items)
    mixed = concat(surrogate.with_dims(n_users=n + budget.n_fake), fake)
    real_users = np.flatnonzero(surrogate.user_counts() > 0)
    observed = observed_matrix(surrogate, n + budget.n_fake)
    return init, mixed, real_users, observed


def co_attack(surrogate: InteractionSet, budget: AttackBudget, config: TrainConfig, seed: int,
              attack_weight: float = 1.0) -> FakeProfileSet:
    """Co-training attack: joint MSE + attack-loss training over all fake users at once.

    Fake users are injected with profiles drawn from the real rating
    distribution, the surrogate is pretrained for ``config.pretrain_epochs``
    on the MSE alone, then trained on MSE plus attack loss for the remaining
    epochs. Profiles are read off the fake users' highest predictions.
    """
    init, mixed, real_users, observed = _poisoned_surrogate(surrogate, budget, seed)
    cfg = config.replace(seed=seed)
    model = init_model(mixed.n_users, mixed.n_items, cfg)
    objective = AttackObjective(budget.target, real_users, observed, budget.kappa, budget.topk,
                                attack_weight, len(mixed))
    trained, history = train(model, mixed, cfg, objective, select_best=False)
    fake_rows = np.arange(surrogate.n_users, mixed.n_users)
    return extract_profiles(trained, fake_rows, budget, attack_loss=history.attack_loss,
                            train_loss=history.train_loss)


def gco_attack(surrogate: InteractionSet, budget: AttackBudget, config: TrainConfig, tcd_config,
               seed: int, attack_weight: float = 1.0) -> FakeProfileSet:
    """Game-based co-training attack: the co-training attack run inside TCD.

    Three surrogates are pretrained on real plus initial fake data; each later
    epoch, model ``j`` gets the pseudo-labels the other two agree on over the
    unrated real-user pairs and takes one epoch of MSE + attack loss on the
    union. Profiles come from model 0.
    """
    from .defenses import member_seeds, pseudo_labels_for, unlabeled_pairs

    init, mixed, real_users, observed = _poisoned_surrogate(surrogate, budget, seed)
    cfgs = [config.replace(seed=s) for s in member_seeds(seed)]
    models = [init_model(mixed.n_users, mixed.n_items, c) for c in cfgs]
    states = [AdamState.for_model(m) for m in models]
    histories = [TrainHistory() for _ in range(3)]
    objectives = [AttackObjective(budget.target, real_users, observed, budget.kappa, budget.topk,
                                  attack_weight, len(mixed)) for _ in range(3)]
    ratio = tcd_config.pseudo_label_ratio
    for epoch in range(config.epochs):
        joint = epoch >= config.pretrain_epochs
        if joint and ratio > 0:
            cand = unlabeled_pairs(surrogate, tcd_config.unlabeled_candidate_cap,
                                   epoch_rng(seed, epoch, 7), users=real_users)
        for j in range(3):
            data = mixed
            if joint and ratio > 0:
                labels = pseudo_labels_for(j, models, cand, ratio, seed=[seed, epoch, j, 7])
                data = concat(mixed, labels.with_dims(n_users=mixed.n_users))
            objectives[j].set_train_size(len(data))
            models[j], _ = train(models[j], data, cfgs[j], objectives[j], epochs=1,
                                 epoch_offset=epoch, state=states[j], history=histories[j],
                                 select_best=False)
    fake_rows = np.arange(surrogate.n_users, mixed.n_users)
    return extract_profiles(models[0], fake_rows, budget, attack_loss=histories[0].attack_loss,
                            train_loss=histories[0].train_loss)


# ---------------------------------------------------------------------------
# PGA baseline


def _item_solvers(model: FactorModel, data: InteractionSet, fake_P: np.ndarray, l2_reg: float):
    """Per-item ridge pieces with user factors frozen.

    For item ``i`` the ridge solution over all its raters is
    ``q_i = A_i^{-1} (b_i + F^T r_i)`` where ``F`` holds the fake user factors
    (who rate every item) and ``r_i`` their ratings. Returns ``(q0, B)`` with
    ``q0[i] = A_i^{-1} b_i`` and ``B[i] = A_i^{-1} F^T``.
    """
    P = model.user_factors
    d = P.shape[1]
    n_fake = fake_P.shape[0]
    FtF = fake_P.T @ fake_P
    q0 = np.zeros((data.n_items, d))
    B = np.zeros((data.n_items, d, n_fake))
    order = np.argsort(data.items, kind="stable")
    bounds = np.searchsorted(data.items[order], np.arange(data.n_items + 1))
    for i in range(data.n_items):
        sel = order[bounds[i]:bounds[i + 1]]
        Pu = P[data.users[sel]]
        count = len(sel) + n_fake
        A = Pu.T @ Pu + FtF + l2_reg * count * np.eye(d)
        rhs = np.hstack([(data.ratings[sel] @ Pu)[:, None], fake_P.T])
        sol = np.linalg.solve(A, rhs)
        q0[i] = sol[:, 0]
        B[i] = sol[:, 1:]
    return q0, B


def pga_attack(surrogate: InteractionSet, budget: AttackBudget, config: TrainConfig, seed: int,
               steps: int = 20, step_size: float = 1.0) -> FakeProfileSet:
    """Projected gradient attack on dense fake rating vectors over a frozen surrogate.

    The surrogate is trained once on real plus initial fake data. With user
    factors frozen, item factors become a ridge function of the fake rating
    matrix, so the attack loss can be differentiated with respect to every
    fake rating. Each step is a projected (clip to [0.2, 1]) gradient step
    with backtracking so the loss never increases. Finally the ``m'``
    highest-rated items of each vector become the fillers.
    """
    init, mixed, real_users, observed = _poisoned_surrogate(surrogate, budget, seed)
    cfg = config.replace(seed=seed)
    model = init_model(mixed.n_users, mixed.n_items, cfg, seed=seed)
    model, _ = train(model, mixed, cfg, None, select_best=False)
    n, m = surrogate.n_users, surrogate.n_items
    fake_rows = np.arange(n, mixed.n_users)
    fake_P = model.user_factors[fake_rows].astype(np.float64)

    R = np.zeros((budget.n_fake, m))
    np.put_along_axis(R, init.items[:, 1:], init.ratings[:, 1:], axis=1)
    trace = []
    if steps > 0:
        q0, B = _item_solvers(model, surrogate, fake_P, cfg.l2_reg)
        work = FactorModel(model.user_factors.astype(np.float64), np.zeros((m, model.d)),
                           model.clamp_floor)

        def evaluate(R_):
            R_t = R_.copy()
            R_t[:, budget.target] = 1.0
            work.item_factors = q0 + np.einsum("idf,fi->id", B, R_t)
            argmin = recommendation_argmin(work, real_users, budget.target, budget.topk, observed)
            loss, _, gQ = _grad_from_argmin(work, real_users, budget.target, budget.kappa, argmin)
            grad = np.einsum("id,idf->fi", gQ, B)
            grad[:, budget.target] = 0.0
            return loss, grad

        loss, grad = evaluate(R)
        trace.append(loss)
        eta = step_size
        for _ in range(steps):
            while True:
                cand = np.clip(R - eta * grad, LEVELS[0], LEVELS[-1])
                cand_loss, cand_grad = evaluate(cand)
                if cand_loss <= loss or eta < 1e-6:
                    break
                eta *= 0.5
            if cand_loss > loss:
                break
            R, loss, grad = cand, cand_loss, cand_grad
            trace.append(loss)
    R[:, budget.target] = -np.inf
    order = np.lexsort((np.broadcast_to(np.arange(m), R.shape), -R), axis=1)
    fillers = order[:, :budget.fillers_per_user]
    vals = np.take_along_axis(R, fillers, axis=1)
    return _assemble(budget.target, fillers, np.clip(vals, LEVELS[0], LEVELS[-1]), attack_loss=trace)
