"""Command-line entry points: gen-data, train, eval, report.

Exit codes: 0 success, 1 domain error (bad data, aborted training, invalid
config values), 2 usage error. Every command echoes its fully resolved
configuration before acting. Run directories are content-addressed by config
hash plus seed under $MASKCL_RUN_ROOT (default ./runs); an existing completed
run is refused unless --force is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import torch

from . import data as data_mod
from .config import PROTOCOL_ALIASES, RunConfig, config_hash, dump_config, load_run_config
from .encoder import load_checkpoint
from .evaluation import build_retrieval_task, compute_map_cmc
from .report import render_report
from .trainer import NEIGHBOR_FEATURES, run_training


def _echo(title: str, body: str) -> None:
    print(f"--- {title} ---")
    print(body.rstrip())
    print("---")


def _apply_ablations(cfg: RunConfig, ablations: list[str] | None) -> RunConfig:
    train = cfg.train
    for item in ablations or []:
        if item == "no-neighbor":
            train = dataclasses.replace(train, disable_l_n=True)
        elif item == "no-bernoulli":
            train = dataclasses.replace(train, disable_bernoulli_weight=True)
        elif item.startswith("neighbor-feature="):
            feature = item.split("=", 1)[1]
            if feature not in NEIGHBOR_FEATURES:
                raise data_mod.ConfigError(
                    f"neighbor-feature must be one of {NEIGHBOR_FEATURES}, got {feature!r}"
                )
            train = dataclasses.replace(train, neighbor_feature=feature)
        else:
            raise data_mod.ConfigError(
                f"unknown ablation {item!r}; expected no-neighbor, no-bernoulli, or neighbor-feature=<...>"
            )
    return RunConfig(data=cfg.data, train=train, eval=cfg.eval)


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.data.validate()
    _echo("resolved config", dump_config(cfg))

    out_root = Path(args.out)
    if (out_root / "manifest.json").exists() and not args.force:
        print(f"error: dataset already exists at {out_root} (use --force to overwrite)", file=sys.stderr)
        return 1
    manifest = data_mod.generate_synthetic(cfg.data)
    data_mod.save_dataset(manifest, out_root)
    counts = manifest.counts()
    print(f"wrote dataset to {out_root}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"dataset hash: {data_mod.dataset_hash(out_root)}")
    return 0


def _default_run_dir(cfg: RunConfig) -> Path:
    root = Path(os.environ.get("MASKCL_RUN_ROOT", "runs"))
    return root / f"{config_hash(cfg)}-s{cfg.train.seed}"


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg = _apply_ablations(cfg, args.ablate)
    cfg.train.validate()
    _echo("resolved config", dump_config(cfg))

    manifest = data_mod.load_dataset(args.data)
    run_dir = Path(args.run_dir) if args.run_dir else _default_run_dir(cfg)
    if (run_dir / "checkpoint_final.pt").exists() and not args.force:
        print(f"error: completed run already exists at {run_dir} (use --force to redo)", file=sys.stderr)
        return 1
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_config(cfg))

    _, _, diagnostics = run_training(manifest, cfg.train, run_dir)
    print(f"run directory: {run_dir}")
    print("final epoch: " + json.dumps(diagnostics[-1].to_dict()))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    protocol = PROTOCOL_ALIASES[args.protocol]
    resolved = {"checkpoint": str(args.checkpoint), "data": str(args.data), "protocol": protocol}
    _echo("resolved config", json.dumps(resolved, indent=1))

    torch.set_num_threads(1)  # bit-reproducible reports on one machine
    model, _, _ = load_checkpoint(args.checkpoint)
    model.eval()
    manifest = data_mod.load_dataset(args.data)
    task = build_retrieval_task(model, manifest, protocol)
    report = compute_map_cmc(task)

    out_path = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval_report.json"
    doc = report.to_dict()
    doc["checkpoint"] = str(args.checkpoint)
    doc["dataset_hash"] = data_mod.dataset_hash(args.data)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(doc, indent=1))

    cmc = report.cmc
    print(f"wrote {out_path}")
    print(
        f"protocol={protocol} mAP={report.map:.4f} CMC@1={cmc[0]:.4f} "
        f"CMC@5={cmc[4]:.4f} CMC@10={cmc[9]:.4f} valid_queries={report.n_valid_queries}"
    )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    resolved = {"runs": [str(r) for r in args.run_dirs], "out": str(args.out)}
    _echo("resolved config", json.dumps(resolved, indent=1))
    written = render_report(args.run_dirs, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset root")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--run-dir", type=Path, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablate", action="append", default=None, metavar="SWITCH")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery splits")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--protocol", choices=["general", "cc"], default="general")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render figures and summary from run logs")
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        return args.func(args)
    except Exception as exc:  # domain errors -> exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
