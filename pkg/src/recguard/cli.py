"""Command line: ``recguard run|list|inspect``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .experiment import ConfigError, list_registries, load_config, run_experiment
from .mf import load_model

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recguard", description="Poisoning attacks and defenses for MF recommenders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment manifest")
    run.add_argument("--config", required=True, help="YAML manifest")
    run.add_argument("--seed", type=int, help="run this single seed instead of the manifest's list")
    run.add_argument("--attack", help="attack name")
    run.add_argument("--defense", help="defense name")
    run.add_argument("--dataset", help="ratings file")
    run.add_argument("--format", help="dataset format")
    run.add_argument("--out", help="output directory")

    sub.add_parser("list", help="list attacks, defenses and dataset formats")

    ins = sub.add_parser("inspect", help="describe a model or TCD ensemble checkpoint")
    ins.add_argument("--checkpoint", required=True, help=".npz file or ensemble directory")
    return p


def _inspect(path: Path) -> dict:
    if path.is_dir() or path.name == "manifest.json":
        manifest_path = path / "manifest.json" if path.is_dir() else path
        manifest = json.loads(manifest_path.read_text())
        members = []
        for name in manifest["members"]:
            model, header = load_model(manifest_path.parent / name)
            members.append(_summary(model, header, name))
        return {"kind": "tcd-ensemble", "designated": manifest["designated"], "members": members,
                "config": manifest.get("config")}
    model, header = load_model(path)
    return _summary(model, header, path.name)


def _summary(model, header, name) -> dict:
    norms_u = np.linalg.norm(model.user_factors, axis=1)
    norms_i = np.linalg.norm(model.item_factors, axis=1)
    return {"file": str(name), "n_users": model.n_users, "n_items": model.n_items, "d": model.d,
            "dtype": str(model.user_factors.dtype), "clamp_floor": model.clamp_floor,
            "mean_user_norm": float(norms_u.mean()), "mean_item_norm": float(norms_i.mean()),
            "config": header.get("config"), "meta": header.get("meta")}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "list":
        for group, names in list_registries().items():
            print(f"{group}: {' '.join(names)}")
        return EXIT_OK
    if args.command == "inspect":
        try:
            info = _inspect(Path(args.checkpoint))
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: cannot read checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps(info, indent=2, sort_keys=True))
        return EXIT_OK

    overrides = {"attack": args.attack, "defense": args.defense, "dataset": args.dataset,
                 "format": args.format, "out": args.out,
                 "seeds": [args.seed] if args.seed is not None else None}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        reports = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    failed = [r for r in reports if r.failed]
    for r in failed:
        print(f"cell seed={r.seed} target={r.target_item} failed: {r.failed}", file=sys.stderr)
    print(f"wrote {len(reports)} rows to {cfg.out}/results.csv")
    return EXIT_RUNTIME if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
