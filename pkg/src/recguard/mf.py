"""Matrix-factorization rating predictor trained with mini-batch Adam.

The predictor is ``clip(p_u . q_i, floor, 1)``. Ranking uses the raw dot
product, which orders items identically to the clipped prediction wherever
the clip is inactive and breaks ties among clipped items sensibly.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import LEVELS, InteractionSet

log = logging.getLogger(__name__)

CLAMP_FLOOR = 1e-6
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, what: str = "training loss"):
        super().__init__(f"{what} became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    d: int = 128
    batch_size: int = 2048
    l2_reg: float = 0.005
    epochs: int = 40
    pretrain_epochs: int = 1
    learning_rate: float = 0.001
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if min(self.d, self.batch_size) <= 0 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("d, batch_size and learning_rate must be positive, epochs >= 0")
        if not 0 <= self.pretrain_epochs <= self.epochs:
            raise ValueError("pretrain_epochs must lie in [0, epochs]")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass
class FactorModel:
    user_factors: np.ndarray
    item_factors: np.ndarray
    clamp_floor: float = CLAMP_FLOOR

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    @property
    def d(self) -> int:
        return self.user_factors.shape[1]

    def copy(self) -> "FactorModel":
        return FactorModel(self.user_factors.copy(), self.item_factors.copy(), self.clamp_floor)

    def scores(self, users=None) -> np.ndarray:
        """Raw (unclipped) dot products, rows = ``users`` (all users by default)."""
        P = self.user_factors if users is None else self.user_factors[users]
        return P @ self.item_factors.T

    def predict_many(self, users, items) -> np.ndarray:
        dot = np.einsum("ij,ij->i", self.user_factors[users], self.item_factors[items])
        return np.clip(dot, self.clamp_floor, 1.0)

    def grow_users(self, n_extra: int, rng: np.random.Generator) -> "FactorModel":
        """Return a copy with ``n_extra`` freshly initialized user rows appended."""
        extra = rng.normal(0.0, 1.0 / math.sqrt(self.d), size=(n_extra, self.d))
        P = np.vstack([self.user_factors, extra.astype(self.user_factors.dtype)])
        return FactorModel(P, self.item_factors.copy(), self.clamp_floor)


def init_model(n_users: int, n_items: int, config: TrainConfig, seed: int | None = None) -> FactorModel:
    """Gaussian factors with standard deviation ``1/sqrt(d)``."""
    if n_users <= 0 or n_items <= 0:
        raise ValueError("model dimensions must be positive")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    scale = 1.0 / math.sqrt(config.d)
    P = rng.normal(0.0, scale, size=(n_users, config.d)).astype(config.dtype)
    Q = rng.normal(0.0, scale, size=(n_items, config.d)).astype(config.dtype)
    return FactorModel(P, Q)


def predict(model: FactorModel, u: int, i: int) -> float:
    if not (0 <= u < model.n_users and 0 <= i < model.n_items):
        raise IndexError(f"(user={u}, item={i}) outside model of shape {model.n_users}x{model.n_items}")
    dot = float(model.user_factors[u] @ model.item_factors[i])
    return min(max(dot, model.clamp_floor), 1.0)


def project(x):
    """Snap ratings onto the nearest of the five levels (midpoints round up).

    Accepts scalars or arrays; values outside [0.2, 1.0] clamp to the ends.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot project a non-finite rating")
    # levels are 0.2 apart: index = floor((x - 0.2)/0.2 + 0.5), computed in
    # units of 0.1 with a small guard so exact midpoints round up
    idx = np.floor((arr - 0.1) * 5.0 + 1e-9).astype(np.int64)
    out = LEVELS[np.clip(idx, 0, 4)]
    return float(out) if out.ndim == 0 else out


def _batch_terms(P, Q, users, items, ratings, l2, floor):
    pu = P[users]
    qi = Q[items]
    dot = np.einsum("ij,ij->i", pu, qi)
    pred = np.clip(dot, floor, 1.0)
    err = pred - ratings
    return pu, qi, dot, err


def mse_loss(model: FactorModel, batch: InteractionSet, l2_reg: float = 0.0) -> float:
    """Mean squared error plus per-sample L2 on the touched factor rows."""
    if len(batch) == 0:
        raise ValueError("mse_loss needs a non-empty batch")
    pu, qi, _, err = _batch_terms(model.user_factors, model.item_factors,
                                  batch.users, batch.items, batch.ratings, l2_reg, model.clamp_floor)
    reg = np.einsum("ij,ij->i", pu, pu) + np.einsum("ij,ij->i", qi, qi)
    return float(np.mean(err * err + l2_reg * reg))


def _scatter(index, values, n_rows):
    """Sum rows of ``values`` into a dense ``(n_rows, d)`` array by ``index``."""
    S = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))),
                      shape=(n_rows, len(index)))
    return np.asarray(S @ values)


def mse_grad(model: FactorModel, users, items, ratings, l2_reg: float,
             user_offset=None, item_offset=None):
    """Loss and dense gradients of :func:`mse_loss` w.r.t. both factor matrices.

    ``user_offset``/``item_offset`` are optional dense perturbations added to
    the factors before evaluation (used by the adversarial-training defenses).
    The clip has zero derivative outside ``(floor, 1)``.
    """
    P, Q = model.user_factors, model.item_factors
    if user_offset is not None:
        P = P + user_offset
    if item_offset is not None:
        Q = Q + item_offset
    pu, qi, dot, err = _batch_terms(P, Q, users, items, ratings, l2_reg, model.clamp_floor)
    n = len(ratings)
    active = (dot > model.clamp_floor) & (dot < 1.0)
    reg = np.einsum("ij,ij->i", pu, pu) + np.einsum("ij,ij->i", qi, qi)
    loss = float(np.mean(err * err + l2_reg * reg))
    coef = (2.0 / n) * err * active
    gpu = coef[:, None] * qi + (2.0 * l2_reg / n) * pu
    gqi = coef[:, None] * pu + (2.0 * l2_reg / n) * qi
    gP = _scatter(users, gpu, P.shape[0])
    gQ = _scatter(items, gqi, Q.shape[0])
    return loss, gP.astype(P.dtype, copy=False), gQ.astype(Q.dtype, copy=False)


@dataclass
class AdamState:
    m_user: np.ndarray
    v_user: np.ndarray
    m_item: np.ndarray
    v_item: np.ndarray
    step: int = 0

    @classmethod
    def for_model(cls, model: FactorModel) -> "AdamState":
        z = np.zeros_like
        return cls(z(model.user_factors), z(model.user_factors),
                   z(model.item_factors), z(model.item_factors))


def adam_step(model: FactorModel, state: AdamState, gP, gQ, lr, betas=(0.9, 0.999), eps=1e-8):
    """One in-place Adam update of both factor matrices (``gP``/``gQ`` are clobbered)."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    step = lr / c1
    for theta, m, v, g in ((model.user_factors, state.m_user, state.v_user, gP),
                           (model.item_factors, state.m_item, state.v_item, gQ)):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        np.multiply(g, g, out=g)
        g *= 1.0 - b2
        v += g
        # g is reused as scratch for the denominator
        np.sqrt(v, out=g)
        g *= 1.0 / math.sqrt(c2)
        g += eps
        np.divide(m, g, out=g)
        g *= step
        theta -= g


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    attack_loss: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_mse(self) -> float:
        return self.val_mse[self.best_epoch] if self.best_epoch >= 0 else math.inf


def epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def validation_mse(model: FactorModel, data: InteractionSet) -> float:
    pred = model.predict_many(data.users, data.items)
    return float(np.mean((pred - data.ratings) ** 2))


def train(model: FactorModel, data: InteractionSet, config: TrainConfig, loss_spec=None, *,
          validation: InteractionSet | None = None, select_best: bool | None = None,
          perturbation=None, epochs: int | None = None, state: AdamState | None = None,
          epoch_offset: int = 0, history: TrainHistory | None = None):
    """Mini-batch Adam on the rating MSE, optionally plus an attack objective.

    ``loss_spec`` is ``None`` (MSE only) or an object exposing
    ``refresh(model)`` (called at the start of each epoch) and
    ``grad(model) -> (loss, user_grad, item_grad)`` which is added at every
    step once ``epoch >= config.pretrain_epochs``. ``perturbation`` is an
    optional callable ``(model, users, items, ratings, rng) -> (dP, dQ)`` at
    which the MSE gradient is evaluated instead of at the factors themselves.

    When ``validation`` is given and ``select_best`` is not False, the
    snapshot with the lowest validation MSE is returned. The input model is
    never modified. Returns ``(model, history)``.
    """
    model = model.copy()
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    n_epochs = config.epochs if epochs is None else epochs
    state = state or AdamState.for_model(model)
    history = history or TrainHistory()
    select_best = validation is not None if select_best is None else select_best
    best = model.copy() if select_best else None
    n = len(data)
    bs = config.batch_size
    for local_epoch in range(n_epochs):
        epoch = epoch_offset + local_epoch
        rng = epoch_rng(config.seed, epoch)
        perm = rng.permutation(n)
        attack_on = loss_spec is not None and epoch >= config.pretrain_epochs
        if attack_on:
            loss_spec.refresh(model)
        total, atk_total = 0.0, 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            u, i, r = data.users[idx], data.items[idx], data.ratings[idx]
            dP = dQ = None
            if perturbation is not None:
                dP, dQ = perturbation(model, u, i, r, rng)
            loss, gP, gQ = mse_grad(model, u, i, r, config.l2_reg, dP, dQ)
            if attack_on:
                a_loss, aP, aQ = loss_spec.grad(model)
                gP += aP
                gQ += aQ
                atk_total += a_loss
            total += loss * len(idx)
            adam_step(model, state, gP, gQ, config.learning_rate, config.adam_betas, config.adam_eps)
        mean_loss = total / n
        if not (math.isfinite(mean_loss) and np.isfinite(model.user_factors).all()
                and np.isfinite(model.item_factors).all()):
            raise DivergenceError(epoch)
        history.train_loss.append(mean_loss)
        if attack_on:
            history.attack_loss.append(loss_spec.value(model))
        if validation is not None:
            val = validation_mse(model, validation)
            history.val_mse.append(val)
            if select_best and (history.best_epoch < 0 or val < history.best_val_mse):
                history.best_epoch = len(history.val_mse) - 1
                best = model.copy()
            log.debug("epoch %d loss %.5f val %.5f", epoch, mean_loss, val)
    if select_best and history.best_epoch >= 0:
        return best, history
    return model, history


def recommend_topk(model: FactorModel, u: int, k: int, exclude=()) -> list[int]:
    """Top-``k`` items for user ``u`` by predicted rating, ties to the lower index."""
    exclude = np.unique(np.asarray(list(exclude), dtype=np.int64))
    if k > model.n_items - len(exclude):
        raise ValueError(f"k={k} exceeds the {model.n_items - len(exclude)} candidate items")
    scores = model.scores([u])[0].astype(np.float64)
    return [int(x) for x in topk_rows(scores[None, :], k, [exclude])[0]]


def topk_rows(scores: np.ndarray, k: int, excludes) -> np.ndarray:
    """Row-wise top-``k`` indices of a score matrix, masking ``excludes[row]``.

    Ordering is by descending score, then ascending item index.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    for row, ex in enumerate(excludes):
        if len(ex):
            scores[row, ex] = -np.inf
    m = scores.shape[1]
    if k < m:
        part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(scores, part, axis=1).min(axis=1)
    else:
        kth = np.full(scores.shape[0], -np.inf)
    out = np.empty((scores.shape[0], k), dtype=np.int64)
    for row in range(scores.shape[0]):
        # every item strictly above the kth value, plus the lowest-index ties
        cand = np.flatnonzero(scores[row] >= kth[row])
        s = scores[row, cand]
        order = np.lexsort((cand, -s))
        out[row] = cand[order[:k]]
    return out


def save_model(model: FactorModel, path, config: TrainConfig | None = None, **meta) -> Path:
    """Write an ``.npz`` checkpoint (layout documented in the README)."""
    path = Path(path)
    header = {
        "format": "recguard-factor-model",
        "version": CHECKPOINT_VERSION,
        "n_users": model.n_users,
        "n_items": model.n_items,
        "d": model.d,
        "clamp_floor": model.clamp_floor,
        "config": asdict(config) if config is not None else None,
        "meta": meta,
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)),
                 user_factors=np.ascontiguousarray(model.user_factors),
                 item_factors=np.ascontiguousarray(model.item_factors))
    return path


def load_model(path) -> tuple[FactorModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "recguard-factor-model":
            raise ValueError(f"{path} is not a recguard checkpoint")
        model = FactorModel(z["user_factors"].copy(), z["item_factors"].copy(),
                            float(header["clamp_floor"]))
    if model.user_factors.shape != (header["n_users"], header["d"]):
        raise ValueError(f"{path}: user factor shape disagrees with header")
    return model, header


def clone_state(state: AdamState) -> AdamState:
    return copy.deepcopy(state)
