"""Config-driven attack/defense experiments: one cell per (seed, target)."""
from __future__ import annotations

import csv
import datetime as _dt
import difflib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import yaml

from . import attacks
from .data import FORMATS, InteractionSet, SplitSet, concat, load_dataset, rating_stats, sample_knowledge, split
from .defenses import (TcdConfig, adversarial_train, member_seeds, random_adversarial_train,
                       tcd_train)
from .metrics import (ExperimentReport, aggregate, hr_target, hr_test, observed_matrix,
                      rank_shift, robustness_improvement)
from .mf import TrainConfig, init_model, save_model, train

log = logging.getLogger(__name__)

ATTACKS = ("average", "co_attack", "gco_attack", "none", "pga", "random")
DEFENSES = ("at", "none", "rat", "tcd")
TARGET_KINDS = ("random", "unpopular")
CSV_COLUMNS = ("dataset", "attack", "defense", "target_kind", "target_item", "seed",
               "hr_origin_test", "hr_origin_target", "hr_attack_target", "hr_defense_target",
               "hr_defense_test", "ri", "mean_rank_shift")


class ConfigError(ValueError):
    pass


def _nearest(name, options):
    close = difflib.get_close_matches(str(name), list(options), n=1, cutoff=0.0)
    return f"; did you mean {close[0]!r}?" if close else ""


@dataclass
class ExperimentConfig:
    """Flat experiment manifest. Keys prefixed ``train.`` and ``tcd.`` address the nested configs."""

    dataset: str = "data/ml-100k/u.data"
    format: str = "ml100k"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    target_kind: str = "unpopular"
    target_count: int = 5
    target_items: list | None = None
    target_seed: int = 0
    unpopular_threshold: int = 5
    pairing: str = "grid"
    attack: str = "none"
    defense: str = "none"
    attack_size: float = 0.03
    fillers: int | None = None
    knowledge_fraction: float = 0.4
    kappa: float = 0.2
    attack_topk: int = 50
    attack_weight: float = 1.0
    pga_steps: int = 20
    hr_k: int = 50
    at_epsilon: float = 0.03
    rat_sigma: float = 0.01
    rat_cap: float = 0.03
    out: str = "results"
    save_checkpoints: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    tcd_pretrain_epochs: int | None = None
    tcd_pseudo_label_ratio: float | None = None
    tcd_unlabeled_candidate_cap: int | None = None

    def validate(self) -> "ExperimentConfig":
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}{_nearest(self.attack, ATTACKS)}")
        if self.defense not in DEFENSES:
            raise ConfigError(f"unknown defense {self.defense!r}{_nearest(self.defense, DEFENSES)}")
        if self.format not in FORMATS:
            raise ConfigError(f"unknown dataset format {self.format!r}{_nearest(self.format, FORMATS)}")
        if self.target_kind not in TARGET_KINDS:
            raise ConfigError(f"unknown target kind {self.target_kind!r}"
                              f"{_nearest(self.target_kind, TARGET_KINDS)}")
        if self.pairing not in ("grid", "zip"):
            raise ConfigError("pairing must be 'grid' or 'zip'")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not Path(self.dataset).is_file():
            raise ConfigError(f"dataset file not readable: {self.dataset}")
        if not 0 < self.knowledge_fraction <= 1:
            raise ConfigError("knowledge_fraction must lie in (0, 1]")
        return self

    def tcd_config(self, seed: int) -> TcdConfig:
        base = TcdConfig.for_dataset(self.format, self.train, seed)
        return TcdConfig(
            pretrain_epochs=base.pretrain_epochs if self.tcd_pretrain_epochs is None else self.tcd_pretrain_epochs,
            pseudo_label_ratio=(base.pseudo_label_ratio if self.tcd_pseudo_label_ratio is None
                                else self.tcd_pseudo_label_ratio),
            unlabeled_candidate_cap=self.tcd_unlabeled_candidate_cap,
            train=self.train.replace(seed=seed), seeds=member_seeds(seed))

    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "train":
                for k, v in asdict(value).items():
                    out[f"train.{k}"] = list(v) if isinstance(v, tuple) else v
            else:
                out[f.name] = value
        return out

    @classmethod
    def keys(cls) -> list[str]:
        return sorted(cls().to_flat())

    @classmethod
    def from_flat(cls, values: dict) -> "ExperimentConfig":
        known = set(cls.keys())
        top, train_kw = {}, {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key.startswith("tcd.") and f"tcd_{key[4:]}" in known:
                key = f"tcd_{key[4:]}"
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}{_nearest(key, known)}")
            if key.startswith("train."):
                train_kw[key[6:]] = value
            else:
                top[key] = value
        try:
            return cls(train=TrainConfig(**train_kw), **top)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _flatten(mapping: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, f"{name}."))
        else:
            out[name] = value
    return out


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML manifest (flat dotted keys, nested mappings are flattened) and apply overrides."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    flat = _flatten(raw)
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_flat(flat).validate()


def list_registries() -> dict:
    return {"attacks": sorted(ATTACKS), "defenses": sorted(DEFENSES), "datasets": sorted(FORMATS)}


def select_targets(data: InteractionSet, kind: str, count: int, seed: int, threshold: int = 5) -> list[int]:
    """Fixed target items: uniform over all items, or over items with fewer than ``threshold`` ratings.

    Popularity is counted on the full dataset, so an unpopular target also has
    fewer than ``threshold`` ratings in any attacker sample of it.
    """
    counts = data.item_counts()
    pool = np.flatnonzero(counts < threshold) if kind == "unpopular" else np.arange(data.n_items)
    if len(pool) < count:
        raise ConfigError(f"only {len(pool)} candidate {kind} targets, {count} requested")
    rng = np.random.default_rng([seed, 404])
    return sorted(int(x) for x in rng.choice(pool, size=count, replace=False))


def _dataset_name(cfg: ExperimentConfig) -> str:
    return cfg.format


def _with_users(s: SplitSet, n_users: int) -> SplitSet:
    return SplitSet(s.train.with_dims(n_users=n_users), s.validation.with_dims(n_users=n_users),
                    s.test.with_dims(n_users=n_users))


class _Clean:
    """Per-seed clean split and victim, shared by every target of that seed."""

    def __init__(self, data: InteractionSet, cfg: ExperimentConfig, seed: int):
        self.split = split(data, seed)
        tc = cfg.train.replace(seed=seed)
        self.model, _ = train(init_model(data.n_users, data.n_items, tc), self.split.train, tc,
                              validation=self.split.validation)
        self.observed = observed_matrix(self.split.observed(), data.n_users)
        self.users = np.arange(data.n_users)
        self.hr_test = hr_test(self.model, self.split, cfg.hr_k)


def _generate(cfg: ExperimentConfig, surrogate: InteractionSet, budget, seed: int):
    tc = cfg.train.replace(seed=seed)
    name = cfg.attack
    if name == "random":
        return attacks.random_attack(rating_stats(surrogate), budget, seed)
    if name == "average":
        return attacks.average_attack(rating_stats(surrogate), budget, seed)
    if name == "pga":
        return attacks.pga_attack(surrogate, budget, tc, seed, steps=cfg.pga_steps)
    if name == "co_attack":
        return attacks.co_attack(surrogate, budget, tc, seed, attack_weight=cfg.attack_weight)
    if name == "gco_attack":
        return attacks.gco_attack(surrogate, budget, tc, cfg.tcd_config(seed), seed,
                                  attack_weight=cfg.attack_weight)
    raise ConfigError(f"unknown attack {name!r}")


def _defend(cfg: ExperimentConfig, data: SplitSet, seed: int):
    tc = cfg.train.replace(seed=seed)
    if cfg.defense == "tcd":
        ens = tcd_train(data, cfg.tcd_config(seed))
        return ens.model, ens
    if cfg.defense == "at":
        return adversarial_train(data, tc, cfg.at_epsilon)[0], None
    if cfg.defense == "rat":
        return random_adversarial_train(data, tc, cfg.rat_sigma, cfg.rat_cap)[0], None
    raise ConfigError(f"unknown defense {cfg.defense!r}")


def run_cell(cfg: ExperimentConfig, data: InteractionSet, clean: _Clean, seed: int, target: int,
             checkpoint_dir: Path | None = None) -> ExperimentReport:
    """One (seed, target) cell: clean victim, attack, poisoned victim, optional defense."""
    rep = ExperimentReport(dataset=_dataset_name(cfg), attack=cfg.attack, defense=cfg.defense,
                           target_kind=cfg.target_kind, target_item=target, seed=seed)
    k = cfg.hr_k
    rep.hr_origin_test = clean.hr_test
    rep.hr_origin_target = hr_target(clean.model, target, clean.users, clean.observed, k)
    tag = f"seed{seed}_item{target}"
    if checkpoint_dir is not None:
        save_model(clean.model, checkpoint_dir / f"{tag}_clean.npz", cfg.train, seed=seed)

    poisoned = clean.split
    attacked = clean.model
    if cfg.attack == "none":
        rep.hr_attack_target, rep.hr_attack_test = rep.hr_origin_target, rep.hr_origin_test
    else:
        surrogate = sample_knowledge(clean.split.observed(), cfg.knowledge_fraction, seed)
        budget = attacks.AttackBudget.for_dataset(data, target, cfg.attack_size, cfg.fillers,
                                                  knowledge_fraction=cfg.knowledge_fraction,
                                                  kappa=cfg.kappa, topk=cfg.attack_topk)
        budget.validate(data.n_users, data.n_items)
        profiles = _generate(cfg, surrogate, budget, seed)
        profiles.validate()
        fake = profiles.to_interactions(data.n_users, data.n_items)
        poisoned = _with_users(clean.split, fake.n_users)
        poisoned = SplitSet(concat(poisoned.train, fake), poisoned.validation, poisoned.test)
        tc = cfg.train.replace(seed=seed)
        attacked, _ = train(init_model(fake.n_users, data.n_items, tc), poisoned.train, tc,
                            validation=poisoned.validation)
        rep.hr_attack_target = hr_target(attacked, target, clean.users, clean.observed, k)
        rep.hr_attack_test = hr_test(attacked, poisoned, k, users=clean.users)
        if checkpoint_dir is not None:
            profiles.save(checkpoint_dir / f"{tag}_profiles.tsv")
            save_model(attacked, checkpoint_dir / f"{tag}_attack.npz", cfg.train, seed=seed,
                       attack=cfg.attack, target=target)
    rep.rank_shift_samples = rank_shift(clean.model, attacked, target, clean.users,
                                        clean.observed).tolist()

    if cfg.defense == "none":
        rep.hr_defense_target, rep.hr_defense_test = rep.hr_attack_target, rep.hr_attack_test
        defended = attacked
    else:
        defended, ensemble = _defend(cfg, poisoned, seed)
        rep.hr_defense_target = hr_target(defended, target, clean.users, clean.observed, k)
        rep.hr_defense_test = hr_test(defended, poisoned, k, users=clean.users)
        if checkpoint_dir is not None:
            if ensemble is not None:
                ensemble.save(checkpoint_dir / f"{tag}_tcd", cfg.tcd_config(seed))
            else:
                save_model(defended, checkpoint_dir / f"{tag}_defense.npz", cfg.train, seed=seed,
                           defense=cfg.defense, target=target)
    rep.defense_rank_shift_samples = rank_shift(clean.model, defended, target, clean.users,
                                                clean.observed).tolist()
    rep.ri = robustness_improvement(rep.hr_origin_target, rep.hr_attack_target, rep.hr_defense_target)
    return rep


def cells(cfg: ExperimentConfig, targets: list[int]) -> list[tuple[int, int]]:
    if cfg.pairing == "zip":
        if len(targets) != len(cfg.seeds):
            raise ConfigError("pairing 'zip' needs as many targets as seeds")
        return list(zip(cfg.seeds, targets))
    return [(s, t) for s in cfg.seeds for t in targets]


def run_experiment(cfg: ExperimentConfig, data: InteractionSet | None = None,
                   write: bool = True) -> list[ExperimentReport]:
    """Run every cell, writing results under ``cfg.out`` unless ``write`` is False.

    A failing cell is recorded with ``failed`` set and the sweep continues.
    """
    data = data if data is not None else load_dataset(cfg.dataset, cfg.format)
    targets = cfg.target_items or select_targets(data, cfg.target_kind, cfg.target_count,
                                                 cfg.target_seed, cfg.unpopular_threshold)
    out = Path(cfg.out)
    ckpt = out / "checkpoints" if (write and cfg.save_checkpoints) else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    reports, clean_cache = [], {}
    for seed, target in cells(cfg, list(targets)):
        try:
            if seed not in clean_cache:
                clean_cache.clear()
                clean_cache[seed] = _Clean(data, cfg, seed)
            rep = run_cell(cfg, data, clean_cache[seed], seed, int(target), ckpt)
        except Exception as exc:  # a failed cell must not sink the sweep
            log.exception("cell seed=%s target=%s failed", seed, target)
            rep = ExperimentReport(dataset=_dataset_name(cfg), attack=cfg.attack, defense=cfg.defense,
                                   target_kind=cfg.target_kind, target_item=int(target), seed=seed,
                                   failed=f"{type(exc).__name__}: {exc}")
        log.info("seed %s target %s: attack HR %.4f defense HR %.4f", seed, target,
                 rep.hr_attack_target, rep.hr_defense_target)
        reports.append(rep)
    if write:
        emit_report(reports, out, cfg)
    return reports


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def library_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def emit_report(reports: list[ExperimentReport], outdir, cfg: ExperimentConfig | None = None) -> dict:
    """Write ``results.csv``, ``results.json`` and ``rank_shift.csv`` into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {name: outdir / name for name in ("results.csv", "results.json", "rank_shift.csv")}
    with open(paths["results.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            row = r.to_dict()
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    with open(paths["rank_shift.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "target_item", "phase", "rank_shift"))
        for r in reports:
            for phase, samples in (("attack", r.rank_shift_samples),
                                   ("defense", r.defense_rank_shift_samples)):
                for s in samples:
                    w.writerow((r.seed, r.target_item, phase, int(s)))
    ok = [r for r in reports if r.failed is None]
    doc = {
        "library_version": library_version(),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": cfg.to_flat() if cfg is not None else None,
        "reports": [_json_report(r) for r in reports],
        "aggregate": _json_report(aggregate(ok)) if ok else None,
    }
    paths["results.json"].write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True))
    return paths


def _json_report(r: ExperimentReport) -> dict:
    d = r.to_dict()
    d["n_rank_shift_samples"] = len(d["rank_shift_samples"])
    return d
