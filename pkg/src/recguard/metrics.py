"""Hit ratio, robustness improvement, rank shift and cross-seed aggregation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from .data import InteractionSet, SplitSet

CHUNK = 512


def observed_matrix(data: InteractionSet, n_users: int | None = None) -> sp.csr_matrix:
    n_users = n_users or data.n_users
    mask = sp.csr_matrix((np.ones(len(data), dtype=bool), (data.users, data.items)),
                         shape=(n_users, data.n_items))
    mask.sum_duplicates()
    return mask


def item_ranks(model, users, items, observed: sp.csr_matrix) -> np.ndarray:
    """0-based rank of ``items[k]`` in user ``users[k]``'s list of unobserved items.

    The ordering matches :func:`recguard.mf.recommend_topk`: descending score,
    ties to the lower item index. Pairs whose item is itself observed get -1.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ranks = np.empty(len(users), dtype=np.int64)
    cols = np.arange(model.n_items)
    for start in range(0, len(users), CHUNK):
        u = users[start:start + CHUNK]
        it = items[start:start + CHUNK]
        scores = model.scores(u).astype(np.float64)
        seen = observed[u].toarray()
        s_t = scores[np.arange(len(u)), it][:, None]
        ahead = (scores > s_t) | ((scores == s_t) & (cols[None, :] < it[:, None]))
        ahead &= ~seen
        r = ahead.sum(axis=1)
        r[seen[np.arange(len(u)), it]] = -1
        ranks[start:start + CHUNK] = r
    return ranks


def hr_test(model, split: SplitSet, k: int = 50, users=None) -> float:
    """Share of users whose held-out test item lands in their top-``k``.

    Candidates exclude everything the user consumed in train and validation.
    Only users present in the test split (real users) are counted.
    """
    test = split.test
    if len(test) == 0:
        raise ValueError("empty test split")
    keep = np.ones(len(test), dtype=bool) if users is None else np.isin(test.users, users)
    observed = observed_matrix(split.observed(), model.n_users)
    ranks = item_ranks(model, test.users[keep], test.items[keep], observed)
    return float(np.mean((ranks >= 0) & (ranks < k)))


def hr_target(model, target: int, users, observed: sp.csr_matrix, k: int = 50) -> float:
    """Share of ``users`` with ``target`` in their top-``k`` over unobserved items."""
    users = np.asarray(users, dtype=np.int64)
    if len(users) == 0:
        raise ValueError("hr_target needs at least one user")
    ranks = item_ranks(model, users, np.full(len(users), target), observed)
    return float(np.mean((ranks >= 0) & (ranks < k)))


def robustness_improvement(hr_origin: float, hr_attack: float, hr_defense: float):
    """``1 - (defense - origin) / (attack - origin)``; None when the attack had no effect.

    Evaluated exactly on the shortest decimal form of each input and rounded once,
    so e.g. origin 0.2, attack 0.6, defense 0.4 gives exactly 0.5.
    """
    if hr_attack == hr_origin:
        return None
    o, a, d = (Fraction(repr(float(x))) for x in (hr_origin, hr_attack, hr_defense))
    return float(1 - (d - o) / (a - o))


def rank_shift(model_before, model_after, target: int, users, observed: sp.csr_matrix) -> np.ndarray:
    """Per-user ``rank_before - rank_after`` of ``target``; positive means promoted.

    Users who already consumed the target have no rank and are dropped.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.full(len(users), target)
    before = item_ranks(model_before, users, items, observed)
    after = item_ranks(model_after, users, items, observed)
    keep = before >= 0
    return (before - after)[keep]


@dataclass
class ExperimentReport:
    dataset: str = ""
    attack: str = "none"
    defense: str = "none"
    target_kind: str = ""
    target_item: int = -1
    seed: int = 0
    hr_origin_test: float = math.nan
    hr_origin_target: float = math.nan
    hr_attack_target: float = math.nan
    hr_attack_test: float = math.nan
    hr_defense_target: float = math.nan
    hr_defense_test: float = math.nan
    ri: float | None = None
    rank_shift_samples: list = field(default_factory=list)
    defense_rank_shift_samples: list = field(default_factory=list)
    failed: str | None = None
    n_seeds: int = 1
    std: dict = field(default_factory=dict)
    ri_excluded: int = 0

    @property
    def mean_rank_shift(self) -> float:
        return float(np.mean(self.rank_shift_samples)) if len(self.rank_shift_samples) else math.nan

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mean_rank_shift"] = self.mean_rank_shift
        return out


METRIC_FIELDS = ("hr_origin_test", "hr_origin_target", "hr_attack_target", "hr_attack_test",
                 "hr_defense_target", "hr_defense_test")


def aggregate(reports: list[ExperimentReport]) -> ExperimentReport:
    """Mean and sample standard deviation of every metric across reports.

    Reports with an undefined RI are left out of the RI mean; how many were
    left out is stored in ``ri_excluded``. Failed reports are ignored.
    """
    ok = [r for r in reports if r.failed is None]
    if not ok:
        raise ValueError("no successful reports to aggregate")
    first = ok[0]
    out = ExperimentReport(dataset=first.dataset, attack=first.attack, defense=first.defense,
                           target_kind=first.target_kind, target_item=-1, seed=-1, n_seeds=len(ok))
    for name in METRIC_FIELDS:
        vals = np.array([getattr(r, name) for r in ok], dtype=np.float64)
        setattr(out, name, float(np.mean(vals)))
        out.std[name] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    ris = [r.ri for r in ok if r.ri is not None]
    out.ri_excluded = len(ok) - len(ris)
    if ris:
        out.ri = float(np.mean(ris))
        out.std["ri"] = float(np.std(ris, ddof=1)) if len(ris) > 1 else 0.0
    out.rank_shift_samples = [s for r in ok for s in r.rank_shift_samples]
    out.defense_rank_shift_samples = [s for r in ok for s in r.defense_rank_shift_samples]
    return out
