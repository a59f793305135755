"""Interaction data: loading, splitting, attacker-side sampling and rating statistics.

Ratings are stored normalized as ``raw / 5`` so the five admissible levels are
``0.2, 0.4, 0.6, 0.8, 1.0``.
"""
from __future__ import annotations

import io
import urllib.request
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RATING_SCALE = 5.0
LEVELS = np.array([0.2, 0.4, 0.6, 0.8, 1.0])
FORMATS = ("filmtrust", "ml100k", "ml1m")
FILMTRUST_MIN_RATINGS = 15


class DatasetError(ValueError):
    """Raised for unreadable or empty interaction files."""


@dataclass(frozen=True)
class InteractionSet:
    """Sparse (user, item, rating) triples over a fixed dense index space.

    ``users``, ``items`` and ``ratings`` are parallel arrays. The index maps
    translate raw file ids to dense indices and are shared by every subset
    derived from the same source.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    n_users: int
    n_items: int
    user_id_map: dict = field(default_factory=dict, repr=False, compare=False)
    item_id_map: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("users", "items"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        r = np.ascontiguousarray(self.ratings, dtype=np.float64)
        r.setflags(write=False)
        object.__setattr__(self, "ratings", r)
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise ValueError("users, items and ratings must have equal length")

    def __len__(self):
        return len(self.ratings)

    def subset(self, idx) -> "InteractionSet":
        idx = np.asarray(idx)
        return InteractionSet(self.users[idx], self.items[idx], self.ratings[idx],
                              self.n_users, self.n_items, self.user_id_map, self.item_id_map)

    def with_dims(self, n_users=None, n_items=None) -> "InteractionSet":
        return InteractionSet(self.users, self.items, self.ratings,
                              n_users or self.n_users, n_items or self.n_items,
                              self.user_id_map, self.item_id_map)

    def keys(self) -> np.ndarray:
        """Flat ``user * n_items + item`` key per interaction."""
        return self.users * self.n_items + self.items

    def observed_by_user(self) -> list[np.ndarray]:
        """Sorted item indices observed by each user."""
        order = np.lexsort((self.items, self.users))
        bounds = np.searchsorted(self.users[order], np.arange(self.n_users + 1))
        items = self.items[order]
        return [items[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)

    def denormalized(self) -> np.ndarray:
        """Raw integer ratings in 1..5."""
        return np.rint(self.ratings * RATING_SCALE).astype(np.int64)


def concat(*parts: InteractionSet, n_users=None, n_items=None) -> InteractionSet:
    """Union of interaction sets sharing one index space (no de-duplication)."""
    first = parts[0]
    return InteractionSet(
        np.concatenate([p.users for p in parts]),
        np.concatenate([p.items for p in parts]),
        np.concatenate([p.ratings for p in parts]),
        n_users or max(p.n_users for p in parts),
        n_items or max(p.n_items for p in parts),
        first.user_id_map, first.item_id_map,
    )


@dataclass(frozen=True)
class SplitSet:
    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet

    def observed(self) -> InteractionSet:
        """Everything a user has consumed outside the test set."""
        return concat(self.train, self.validation)


def _parse_line(line: str, fmt: str):
    if fmt == "ml100k":
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError("expected 4 tab-separated fields")
    elif fmt == "ml1m":
        parts = line.split("::")
        if len(parts) != 4:
            raise ValueError("expected 4 '::'-separated fields")
    else:
        parts = line.split()
        if len(parts) != 3:
            raise ValueError("expected 3 space-separated fields")
    user, item = parts[0].strip(), parts[1].strip()
    rating = float(parts[2])
    low = 0.5 if fmt == "filmtrust" else 1.0
    if not low <= rating <= RATING_SCALE:
        raise ValueError(f"rating {rating} outside [{low:g}, 5]")
    return user, item, rating


def load_dataset(path, fmt: str) -> InteractionSet:
    """Read a ratings file into an :class:`InteractionSet`.

    ``fmt`` is one of ``ml100k`` (tab separated, with timestamp), ``ml1m``
    (``::`` separated) or ``filmtrust`` (whitespace separated triples). For
    FilmTrust, users with fewer than 15 ratings are dropped before indexing.
    Repeated (user, item) pairs keep the last rating seen.
    """
    if fmt not in FORMATS:
        raise DatasetError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    latest: dict[tuple[str, str], float] = {}
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                user, item, rating = _parse_line(line.rstrip("\n"), fmt)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: cannot parse line: {exc}") from None
            latest.pop((user, item), None)
            latest[(user, item)] = rating

    if fmt == "filmtrust":
        counts: dict[str, int] = {}
        for user, _ in latest:
            counts[user] = counts.get(user, 0) + 1
        latest = {k: v for k, v in latest.items() if counts[k[0]] >= FILMTRUST_MIN_RATINGS}
    if not latest:
        raise DatasetError(f"{path}: no interactions left after filtering")

    user_id_map: dict[str, int] = {}
    item_id_map: dict[str, int] = {}
    for user, item in sorted(latest, key=lambda k: (_sort_key(k[0]), _sort_key(k[1]))):
        user_id_map.setdefault(user, len(user_id_map))
    for item in sorted({k[1] for k in latest}, key=_sort_key):
        item_id_map[item] = len(item_id_map)

    n = len(latest)
    users = np.empty(n, dtype=np.int64)
    items = np.empty(n, dtype=np.int64)
    ratings = np.empty(n)
    for k, ((user, item), rating) in enumerate(latest.items()):
        users[k] = user_id_map[user]
        items[k] = item_id_map[item]
        ratings[k] = rating
    order = np.lexsort((items, users))
    ratings = ratings[order]
    if fmt == "filmtrust" and ratings.max() <= 4.0:
        # native half-star scale 0.5..4 stretched onto 1..5 before leveling
        ratings = ratings * (RATING_SCALE / 4.0)
    return InteractionSet(users[order], items[order], normalize(ratings),
                          len(user_id_map), len(item_id_map), user_id_map, item_id_map)


def _sort_key(raw_id: str):
    return (0, int(raw_id), "") if raw_id.isdigit() else (1, 0, raw_id)


def normalize(raw) -> np.ndarray:
    """Map raw ratings in [1, 5] onto the levels ``{0.2, ..., 1.0}``; fractions round up."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.clip(np.ceil(raw - 1e-9), 1, RATING_SCALE) / RATING_SCALE


def split(data: InteractionSet, seed: int, validation_fraction: float = 0.1) -> SplitSet:
    """Leave-one-out test split followed by a 9:1 train/validation split.

    One interaction per user is drawn uniformly for the test set; the rest
    are shuffled and divided 9:1.
    """
    counts = data.user_counts()
    if np.any(counts == 0):
        raise DatasetError("every user needs at least one interaction to split")
    rng = np.random.default_rng(seed)
    order = np.argsort(data.users, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pick = starts + np.floor(rng.random(data.n_users) * counts).astype(np.int64)
    test_idx = order[pick]
    mask = np.ones(len(data), dtype=bool)
    mask[test_idx] = False
    rest = np.flatnonzero(mask)
    rest = rest[rng.permutation(len(rest))]
    n_train = int(round(len(rest) * (1.0 - validation_fraction)))
    return SplitSet(
        train=data.subset(np.sort(rest[:n_train])),
        validation=data.subset(np.sort(rest[n_train:])),
        test=data.subset(np.sort(test_idx)),
    )


def sample_knowledge(data: InteractionSet, fraction: float, seed: int) -> InteractionSet:
    """Uniformly sample ``floor(fraction * len(data))`` interactions without replacement.

    The index space is kept so surrogate and victim share coordinates.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    size = int(np.floor(fraction * len(data)))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(data), size=size, replace=False))
    return data.subset(idx)


@dataclass(frozen=True)
class RatingStats:
    global_mean: float
    global_std: float
    item_mean: np.ndarray
    item_std: np.ndarray
    user_count: np.ndarray
    level_probs: np.ndarray

    @property
    def mean_user_count(self) -> float:
        active = self.user_count[self.user_count > 0]
        return float(active.mean())


def rating_stats(data: InteractionSet) -> RatingStats:
    """Empirical rating statistics. Unrated items fall back to the global values."""
    if len(data) == 0:
        raise DatasetError("rating statistics need a non-empty dataset")
    r = data.ratings
    g_mean, g_std = float(r.mean()), float(r.std())
    cnt = data.item_counts()
    s1 = np.bincount(data.items, weights=r, minlength=data.n_items)
    s2 = np.bincount(data.items, weights=r * r, minlength=data.n_items)
    rated = cnt > 0
    item_mean = np.full(data.n_items, g_mean)
    item_std = np.full(data.n_items, g_std)
    item_mean[rated] = s1[rated] / cnt[rated]
    item_std[rated] = np.sqrt(np.maximum(s2[rated] / cnt[rated] - item_mean[rated] ** 2, 0.0))
    level_idx = np.clip(np.rint(r * RATING_SCALE).astype(int) - 1, 0, 4)
    level_probs = np.bincount(level_idx, minlength=5) / len(r)
    return RatingStats(g_mean, g_std, item_mean, item_std, data.user_counts(), level_probs)


RECBOLE_WHEEL = "https://pypi.org/pypi/recbole/1.2.1/json"
_RECBOLE_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def fetch_ml100k(dest) -> Path:
    """Write ML-100K as ``u.data`` under ``dest``, using the copy bundled in the RecBole wheel.

    Useful where grouplens.org is unreachable but PyPI is. Returns the file path.
    """
    import json

    dest = Path(dest)
    target = dest / "u.data"
    if target.exists():
        return target
    with urllib.request.urlopen(RECBOLE_WHEEL, timeout=60) as resp:
        meta = json.load(resp)
    url = next(u["url"] for u in meta["urls"] if u["filename"].endswith(".whl"))
    with urllib.request.urlopen(url, timeout=300) as resp:
        wheel = zipfile.ZipFile(io.BytesIO(resp.read()))
    lines = wheel.read(_RECBOLE_MEMBER).decode().splitlines()[1:]
    dest.mkdir(parents=True, exist_ok=True)
    target.write_text("\n".join(lines) + "\n")
    return target
