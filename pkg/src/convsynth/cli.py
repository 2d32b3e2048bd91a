"""Command-line front end: dataset generation, batch simulation, training
phases and evaluation.

Exit codes: 0 success, 2 usage, 3 data error, 4 training divergence. All
artifact writes go through a temp file plus rename, so interrupted runs never
leave truncated output. Reruns with the same seed produce byte-identical
files.
"""

import argparse
import json
import os
import random
import subprocess
import sys
from collections import Counter
from dataclasses import dataclass, fields

from . import __version__
from .evaluate import SUCCESS_AT, evaluate_policy, write_report_csv
from .generate import (
    EmptyDataset,
    MissingConstraint,
    build_dataset,
    design_from_obj,
    design_to_obj,
    pick_category,
    prompt_for_record,
    prompt_from_obj,
    record_from_obj,
    record_to_obj,
    sim_to_obj,
    weighted_sample,
)
from .netlist import NetlistError
from .policy import (
    Diverged,
    PoolStarvation,
    TrainConfig,
    freeze_reference,
    iterative_adapt,
    load_checkpoint,
    rl_finetune,
    save_checkpoint,
    sft_train,
    tokenize,
    write_history_csv,
)
from .reward import load_backend, oracle_backend
from .sim import SimConfig, simulate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig
    train: TrainConfig
    seed: int = 0
    steps: int = 300
    sft_draws: int = 1500
    max_draws: int = 0  # generator draw budget; 0 means the library default
    reward_backend: str = "oracle"  # "oracle" or a saved-backend JSON path


_RUN_FIELDS = {
    "seed": int, "steps": int, "sft_draws": int, "max_draws": int,
    "reward_backend": str,
}
_SIM_FIELDS = {f.name: type(f.default) for f in fields(SimConfig)}
_TRAIN_FIELDS = {f.name: type(f.default) for f in fields(TrainConfig)}


def _coerce(key: str, raw: str, typ: type):
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {raw!r} as {typ.__name__}")


def parse_run_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    """key=value file plus repeatable --set overrides; flags win."""
    pairs: list[tuple[str, str]] = []
    if config_path:
        if not os.path.exists(config_path):
            raise DataError(f"config file not found: {config_path}")
        with open(config_path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{config_path}:{ln}: expected key=value")
                k, v = line.split("=", 1)
                pairs.append((k.strip(), v.strip()))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set {item!r}: expected key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))

    sim_kw: dict = {}
    train_kw: dict = {}
    run_kw: dict = {}
    for key, raw in pairs:
        if key in _SIM_FIELDS:
            sim_kw[key] = _coerce(key, raw, _SIM_FIELDS[key])
        elif key in _TRAIN_FIELDS:
            train_kw[key] = _coerce(key, raw, _TRAIN_FIELDS[key])
        elif key in _RUN_FIELDS:
            run_kw[key] = _coerce(key, raw, _RUN_FIELDS[key])
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        return RunConfig(sim=SimConfig(**sim_kw), train=TrainConfig(**train_kw), **run_kw)
    except ValueError as exc:
        raise UsageError(str(exc))


def config_snapshot(cfg: RunConfig) -> dict:
    snap = {
        "sim": {f.name: getattr(cfg.sim, f.name) for f in fields(SimConfig)},
        "train": {f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)},
    }
    for name in _RUN_FIELDS:
        snap[name] = getattr(cfg, name)
    return snap


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(out_dir: str, cfg: RunConfig, command: str, extra: dict) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "git": _git_describe(),
        "config": config_snapshot(cfg),
        **extra,
    }
    _atomic_write(
        os.path.join(out_dir, "manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )


def _save_checkpoint_atomic(policy, path: str, cfg: TrainConfig, extra: dict) -> None:
    tmp = path + ".tmp"
    save_checkpoint(policy, tmp, cfg=cfg, extra=extra)
    os.replace(tmp, path)


def _load_records(data_dir: str):
    path = os.path.join(data_dir, "dataset.jsonl")
    if not os.path.exists(path):
        raise DataError(f"no dataset at {path}; run the gen command first")
    records = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(record_from_obj(json.loads(line)))
            except (json.JSONDecodeError, KeyError, NetlistError, ValueError) as exc:
                raise DataError(f"{path}:{ln}: bad record: {exc}")
    if not records:
        raise DataError(f"{path}: empty dataset")
    return records


def _training_prompts(records, seed: int, vin: float):
    """Per-record prompts drawn over the 20/40/40 category mix."""
    rng = random.Random(seed)
    out = []
    for rec in records:
        category = pick_category(rng)
        try:
            out.append(prompt_for_record(rec.design, rec.sim, category, vin=vin))
        except MissingConstraint:
            out.append(prompt_for_record(rec.design, rec.sim, "C", vin=vin))
    return out


def _reward_backend(cfg: RunConfig):
    if cfg.reward_backend == "oracle":
        return oracle_backend(cfg.sim)
    if not os.path.exists(cfg.reward_backend):
        raise DataError(f"reward backend file not found: {cfg.reward_backend}")
    return load_backend(cfg.reward_backend)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _write_dataset(out_dir: str, cfg: RunConfig, args, build, partial: bool) -> None:
    lines = [json.dumps(record_to_obj(r), sort_keys=True) for r in build.records]
    _atomic_write(os.path.join(out_dir, "dataset.jsonl"), "".join(s + "\n" for s in lines))
    histogram = dict(sorted(Counter(r.group for r in build.records).items()))
    _write_manifest(
        out_dir, cfg, "gen",
        {
            "seed": args.seed,
            "components": args.components,
            "target": args.target,
            "unique_netlists": build.unique_netlists,
            "records": len(build.records),
            "group_histogram": histogram,
            "partial": partial,
        },
    )
    print(f"unique netlists: {build.unique_netlists}")
    print(f"valid records: {len(build.records)}")
    print(f"group histogram: {histogram}")


def cmd_gen(args) -> int:
    cfg = parse_run_config(args.config, args.set or [])
    os.makedirs(args.out, exist_ok=True)
    try:
        build = build_dataset(
            args.components, args.target, rng_seed=args.seed, cfg=cfg.sim,
            max_draws=cfg.max_draws or None,
        )
    except EmptyDataset as exc:
        raise DataError(str(exc))
    if build.draws_exhausted:
        print(
            f"space exhausted: {build.unique_netlists} unique netlists found "
            f"of {args.target} requested; partial dataset written",
            file=sys.stderr,
        )
        _write_dataset(args.out, cfg, args, build, partial=True)
        return EXIT_DATA
    _write_dataset(args.out, cfg, args, build, partial=False)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = parse_run_config(args.config, args.set or [])
    if not os.path.exists(args.infile):
        raise DataError(f"input not found: {args.infile}")
    out_lines = []
    with open(args.infile) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                design = design_from_obj(json.loads(line))
                result = simulate(design, cfg.sim)
                out_lines.append(
                    {"design": design_to_obj(design), "sim": sim_to_obj(result)}
                )
            except Exception as exc:  # record the failure, keep the batch going
                out_lines.append({"line": ln, "error": f"{type(exc).__name__}: {exc}"})
    _atomic_write(
        args.outfile, "".join(json.dumps(o, sort_keys=True) + "\n" for o in out_lines)
    )
    print(f"simulated {len(out_lines)} lines")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_run_config(args.config, args.set or [])
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.splitext(args.out)[0] + "_metrics.csv"

    if args.phase == "sft":
        records = _load_records(args.data)
        draws = weighted_sample(records, cfg.sft_draws, rng_seed=cfg.seed)
        pairs = [(r.prompt, tokenize(r.design.netlist, r.design.duty)) for r in draws]
        policy = sft_train(pairs, cfg.train, rng_seed=cfg.seed)
        _save_checkpoint_atomic(policy, args.out, cfg.train, {"phase": "sft"})
        write_history_csv(
            [{"step": 0, "pairs": len(pairs), "epochs": cfg.train.sft_epochs}],
            metrics_path,
        )
        print(f"sft checkpoint: {args.out}")
        return EXIT_OK

    # rl and ia refine an earlier checkpoint
    if not args.ckpt:
        raise UsageError(
            f"--phase {args.phase} needs --ckpt from the previous phase "
            "(phase order: sft, then rl, then ia)"
        )
    if not os.path.exists(args.ckpt):
        raise DataError(
            f"checkpoint not found: {args.ckpt} "
            "(phase order: sft, then rl, then ia)"
        )
    policy, _meta = load_checkpoint(args.ckpt)
    records = _load_records(args.data)
    prompts = _training_prompts(records, cfg.seed, cfg.sim.vin)
    backend = _reward_backend(cfg)
    oracle = oracle_backend(cfg.sim)
    ref = freeze_reference(policy)

    if args.phase == "rl":
        policy, history = rl_finetune(
            policy, ref, backend, prompts, cfg.train,
            steps=cfg.steps, rng_seed=cfg.seed, csv_path=metrics_path, oracle=oracle,
        )
        _save_checkpoint_atomic(policy, args.out, cfg.train, {"phase": "rl"})
        print(f"rl checkpoint: {args.out} (steps={len(history)})")
        return EXIT_OK

    policy, rounds = iterative_adapt(
        policy, ref, backend, cfg.train, prompts, rng_seed=cfg.seed, oracle=oracle,
    )
    _save_checkpoint_atomic(policy, args.out, cfg.train, {"phase": "ia"})
    write_history_csv(rounds, metrics_path)
    print(f"ia checkpoint: {args.out} (rounds={len(rounds)})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = parse_run_config(args.config, args.set or [])
    if not os.path.exists(args.ckpt):
        raise DataError(f"checkpoint not found: {args.ckpt}")
    if not os.path.exists(args.prompts):
        raise DataError(f"prompts file not found: {args.prompts}")
    prompts = []
    with open(args.prompts) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                prompts.append(prompt_from_obj(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(f"{args.prompts}:{ln}: bad prompt: {exc}")
    if not prompts:
        raise UsageError(f"{args.prompts}: no prompts")
    if args.samples and len(prompts) > args.samples:
        prompts = prompts[: args.samples]
    try:
        m_values = sorted({int(tok) for tok in args.m.split(",") if tok.strip()})
    except ValueError:
        raise UsageError(f"--m {args.m!r}: expected comma-separated integers")
    if not m_values or m_values[0] < 1:
        raise UsageError("--m values must be >= 1")

    policy, _meta = load_checkpoint(args.ckpt)
    clf = _reward_backend(cfg)
    oracle = oracle_backend(cfg.sim)
    report = evaluate_policy(
        policy, prompts, clf_backend=clf, oracle=oracle,
        rng_seed=cfg.seed, m=max(m_values), cfg=cfg.train,
        at_values=tuple(m_values),
    )
    os.makedirs(args.out, exist_ok=True)
    _atomic_write(os.path.join(args.out, "report.json"), report.to_json() + "\n")
    write_report_csv([(args.label, report)], os.path.join(args.out, "report.csv"))
    _write_manifest(args.out, cfg, "eval", {"seed": cfg.seed, "prompts": len(prompts)})
    print(f"sigma: {report.sigma}")
    print(f"success@m: {report.success_at_m}")
    print(f"dgr: {report.dgr:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convsynth", description="converter topology synthesis pipeline"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override; repeatable, wins over --config")

    p = sub.add_parser("gen", help="generate and simulate a dataset")
    common(p)
    p.add_argument("--components", type=int, required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("simulate", help="batch-simulate designs from JSONL")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="run one training phase")
    common(p)
    p.add_argument("--phase", choices=("sft", "rl", "ia"), required=True)
    p.add_argument("--data", required=True, help="directory with dataset.jsonl")
    p.add_argument("--ckpt", default=None, help="input checkpoint (rl and ia)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over prompts")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts", required=True, help="JSONL of prompts")
    p.add_argument("--m", default=",".join(str(m) for m in SUCCESS_AT))
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="policy")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command == "gen" and not 4 <= args.components <= 10:
        print("--components must be between 4 and 10", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PoolStarvation) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Diverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
