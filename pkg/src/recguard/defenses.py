"""Training-time defenses: triple co-training (TCD) and adversarial-training baselines."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from .data import InteractionSet, SplitSet, concat
from .mf import (AdamState, DivergenceError, FactorModel, TrainConfig, TrainHistory, epoch_rng,
                 init_model, load_model, mse_grad, project, save_model, train)

MAX_EPSILON = 0.03


def member_seeds(seed: int) -> tuple[int, int, int]:
    """Three member seeds for a run seed; the first member reuses the run seed itself."""
    extra = [int(np.random.SeedSequence([seed, j]).generate_state(1)[0]) for j in (1, 2)]
    return (seed, *extra)


@dataclass
class TcdConfig:
    pretrain_epochs: int = 4
    pseudo_label_ratio: float = 1.0
    unlabeled_candidate_cap: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple = (0, 1, 2)
    designated: int = 0

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(self.seeds) != 3:
            raise ValueError("TCD needs exactly three member seeds")
        if not 0 <= self.pretrain_epochs <= self.train.epochs:
            raise ValueError("pretrain_epochs must lie in [0, epochs]")
        if not 0.0 <= self.pseudo_label_ratio <= 1.0:
            raise ValueError("pseudo_label_ratio must lie in [0, 1]")
        if self.unlabeled_candidate_cap is not None and self.unlabeled_candidate_cap <= 0:
            raise ValueError("unlabeled_candidate_cap must be positive or None")

    @classmethod
    def for_dataset(cls, name: str, train: TrainConfig | None = None, seed: int = 0) -> "TcdConfig":
        pre, ratio = {"filmtrust": (1, 1.0), "ml100k": (4, 1.0), "ml1m": (2, 0.2)}[name]
        return cls(pretrain_epochs=pre, pseudo_label_ratio=ratio, train=train or TrainConfig(),
                   seeds=member_seeds(seed))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TcdEnsemble:
    models: list
    designated: int = 0
    histories: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if len(self.models) != 3:
            raise ValueError("a TCD ensemble has exactly three members")
        shapes = {(m.n_users, m.n_items, m.d) for m in self.models}
        if len(shapes) != 1:
            raise ValueError(f"ensemble members disagree on shape: {sorted(shapes)}")

    @property
    def model(self) -> FactorModel:
        return self.models[self.designated]

    def save(self, directory, config: TcdConfig | None = None) -> Path:
        """Three member checkpoints plus ``manifest.json`` in ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for j, m in enumerate(self.models):
            name = f"member{j}.npz"
            save_model(m, directory / name, config.train if config else None, member=j)
            files.append(name)
        manifest = {"format": "recguard-tcd-ensemble", "designated": self.designated,
                    "members": files, "config": config.to_dict() if config else None}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "TcdEnsemble":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        models = [load_model(directory / f)[0] for f in manifest["members"]]
        return cls(models, manifest["designated"])


def unlabeled_pairs(labeled: InteractionSet, cap: int | None, rng: np.random.Generator,
                    users=None) -> tuple[np.ndarray, np.ndarray]:
    """Every (user, item) pair absent from ``labeled``, optionally capped by uniform sampling.

    ``users`` restricts the candidate rows (all users by default). Pairs come
    back sorted by user, then item.
    """
    m = labeled.n_items
    users = np.arange(labeled.n_users) if users is None else np.asarray(users, dtype=np.int64)
    taken = np.zeros(labeled.n_users * m, dtype=bool)
    taken[labeled.keys()] = True
    keys = (users[:, None] * m + np.arange(m)[None, :]).ravel()
    keys = keys[~taken[keys]]
    if cap is not None and len(keys) > cap:
        keys = np.sort(rng.choice(keys, size=cap, replace=False))
    return keys // m, keys % m


def _level_index(model: FactorModel, users, items, chunk: int = 256) -> np.ndarray:
    """Level index 0..4 of the projected prediction for each pair (pairs sorted by user)."""
    out = np.empty(len(users), dtype=np.int8)
    bounds = np.flatnonzero(np.diff(users)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(users)]])
    for s in range(0, len(starts), chunk):
        lo, hi = starts[s], ends[min(s + chunk, len(starts)) - 1]
        rows = users[starts[s:s + chunk]]
        scores = model.scores(rows)
        local = np.repeat(np.arange(len(rows)), ends[s:s + chunk] - starts[s:s + chunk])
        pred = np.clip(scores[local, items[lo:hi]], model.clamp_floor, 1.0)
        out[lo:hi] = np.rint(project(pred) * 5).astype(np.int8) - 1
    return out


def pseudo_labels_for(j: int, ensemble, unlabeled, ratio: float, seed) -> InteractionSet:
    """Pairs on which the two other members' projected predictions coincide.

    ``unlabeled`` is a ``(users, items)`` pair of arrays sorted by user. A
    uniform ``floor(ratio * agreements)`` of the agreeing pairs is kept.
    """
    if j not in (0, 1, 2):
        raise ValueError(f"model index must be 0, 1 or 2, got {j}")
    models = ensemble.models if isinstance(ensemble, TcdEnsemble) else list(ensemble)
    a, b = models[(j + 1) % 3], models[(j + 2) % 3]
    users, items = (np.asarray(x, dtype=np.int64) for x in unlabeled)
    if len(users) == 0 or ratio == 0:
        return InteractionSet(users[:0], items[:0], np.empty(0), a.n_users, a.n_items)
    la = _level_index(a, users, items)
    agree = np.flatnonzero(la == _level_index(b, users, items))
    keep = int(np.floor(ratio * len(agree)))
    if keep < len(agree):
        rng = np.random.default_rng(seed)
        agree = np.sort(rng.choice(agree, size=keep, replace=False))
    levels = (la[agree].astype(np.float64) + 1.0) / 5.0
    return InteractionSet(users[agree], items[agree], levels, a.n_users, a.n_items)


def tcd_train(data: SplitSet, tcd_config: TcdConfig, pseudo_label_dir=None) -> TcdEnsemble:
    """Triple co-training on ``data.train`` with per-epoch pairwise-agreement pseudo-labels.

    Members are trained in order 0, 1, 2 inside each epoch, so member ``j``
    labels with the already-updated earlier members. Training data is only
    ever augmented. ``pseudo_label_dir`` optionally receives one text dump per
    epoch and member.
    """
    labeled = data.train
    if len(labeled) == 0:
        raise ValueError("TCD needs a non-empty training split")
    cfg = tcd_config.train
    cfgs = [cfg.replace(seed=s) for s in tcd_config.seeds]
    models = [init_model(labeled.n_users, labeled.n_items, c) for c in cfgs]
    states = [AdamState.for_model(m) for m in models]
    histories = [TrainHistory() for _ in range(3)]
    run_seed = tcd_config.seeds[0]
    for epoch in range(cfg.epochs):
        pretrain = epoch < tcd_config.pretrain_epochs
        if not pretrain:
            cand = unlabeled_pairs(labeled, tcd_config.unlabeled_candidate_cap,
                                   epoch_rng(run_seed, epoch, 5))
        for j in range(3):
            epoch_data = labeled
            if not pretrain:
                extra = pseudo_labels_for(j, models, cand, tcd_config.pseudo_label_ratio,
                                          seed=[run_seed, epoch, j, 9])
                if pseudo_label_dir is not None:
                    _dump_labels(extra, Path(pseudo_label_dir) / f"epoch{epoch:03d}_member{j}.tsv")
                epoch_data = concat(labeled, extra)
            try:
                models[j], _ = train(models[j], epoch_data, cfgs[j], epochs=1, epoch_offset=epoch,
                                     state=states[j], history=histories[j],
                                     validation=data.validation, select_best=False)
            except DivergenceError as exc:
                raise DivergenceError(exc.epoch, f"TCD member {j} training loss") from None
    return TcdEnsemble(models, tcd_config.designated, histories)


def _dump_labels(labels: InteractionSet, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for u, i, r in zip(labels.users, labels.items, labels.ratings):
            fh.write(f"{u}\t{i}\t{r:.1f}\n")


def _touched(index, n_rows):
    mask = np.zeros(n_rows, dtype=bool)
    mask[index] = True
    return mask


def adversarial_perturbation(epsilon: float, l2_reg: float):
    """Gradient-direction perturbation of the factor rows a batch touches.

    Each touched row moves by ``epsilon`` along its own normalized loss
    gradient; rows with a zero gradient are left alone.
    """

    def perturb(model, users, items, ratings, rng):
        _, gP, gQ = mse_grad(model, users, items, ratings, l2_reg)
        out = []
        for g, idx in ((gP, users), (gQ, items)):
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            live = _touched(idx, g.shape[0])[:, None] & (norms > 0)
            out.append(np.where(live, epsilon * g / np.where(norms > 0, norms, 1.0), 0.0))
        return tuple(out)

    return perturb


def adversarial_train(data: SplitSet, config: TrainConfig, epsilon: float = MAX_EPSILON,
                      model: FactorModel | None = None):
    """Adversarial training: every step's loss is evaluated at worst-case-direction factors."""
    if not 0.0 <= epsilon <= MAX_EPSILON:
        raise ValueError(f"epsilon must lie in [0, {MAX_EPSILON}], got {epsilon}")
    model = model or init_model(data.train.n_users, data.train.n_items, config)
    pert = adversarial_perturbation(epsilon, config.l2_reg) if epsilon > 0 else None
    return train(model, data.train, config, validation=data.validation, perturbation=pert)


def truncated_noise(rng: np.random.Generator, shape, sigma: float, cap: float) -> np.ndarray:
    if sigma == 0:
        return np.zeros(shape)
    bound = cap / sigma
    return truncnorm.rvs(-bound, bound, scale=sigma, size=shape, random_state=rng)


def random_perturbation(sigma: float, cap: float):
    """Truncated-normal noise on the factor rows a batch touches."""

    def perturb(model, users, items, ratings, rng):
        out = []
        for idx, mat in ((users, model.user_factors), (items, model.item_factors)):
            rows = np.unique(idx)
            delta = np.zeros_like(mat)
            delta[rows] = truncated_noise(rng, (len(rows), mat.shape[1]), sigma, cap)
            out.append(delta)
        return tuple(out)

    return perturb


def random_adversarial_train(data: SplitSet, config: TrainConfig, sigma: float = 0.01,
                             cap: float = MAX_EPSILON, model: FactorModel | None = None):
    """Training under random truncated-normal parameter noise."""
    if not 0.0 <= cap <= MAX_EPSILON:
        raise ValueError(f"cap must lie in [0, {MAX_EPSILON}], got {cap}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    model = model or init_model(data.train.n_users, data.train.n_items, config)
    pert = random_perturbation(sigma, cap) if sigma > 0 and cap > 0 else None
    return train(model, data.train, config, validation=data.validation, perturbation=pert)
