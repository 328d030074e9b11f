"""Command-line entry point: collect, preprocess, train, bench, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Option precedence: command-line flag, then ``--config`` file (flat
``key = value`` lines), then built-in default.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("fusion_pilot")

FUSION_CHOICES = ("rgb", "depth", "ss", "early", "mid", "late")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config plumbing


def read_flat_config(path) -> tuple[dict, str]:
    """Parse a flat key-value file; returns (values, sha256 of the bytes)."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    raw = p.read_bytes()
    values = {}
    for n, line in enumerate(raw.decode().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k.replace("-", "_")] = v
    return values, hashlib.sha256(raw).hexdigest()


class Resolver:
    """Looks a setting up on the command line, then in the config file, then in defaults."""

    def __init__(self, args, config: dict):
        self.args = args
        self.config = config
        self.resolved = {}

    def get(self, key, default, kind=str):
        cli = getattr(self.args, key, None)
        if cli is not None:
            val = cli
        elif key in self.config:
            try:
                val = kind(self.config[key])
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
        else:
            val = default
        self.resolved[key] = val
        return val


def home() -> Path:
    return Path(os.environ.get("FUSION_PILOT_HOME", Path.home() / ".fusion_pilot"))


def out_dir(args, sub: str) -> Path:
    return Path(args.out) if args.out else home() / sub


def write_manifest(out: Path, command: str, argv, config_hash, resolved: dict, seeds: dict, artifacts: dict):
    doc = {"command": command, "argv": list(argv), "config_sha256": config_hash, "resolved_config": resolved,
           "seeds": seeds, "artifacts": {k: str(v) for k, v in artifacts.items()},
           "tool": "fusion-pilot", "version": __version__}
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
    return path


def _weathers(text):
    from .sim.world import WEATHERS

    items = [w.strip() for w in text.split(",") if w.strip()]
    for w in items:
        if w not in WEATHERS:
            raise UsageError(f"unknown weather {w!r}; choose from {', '.join(WEATHERS)}")
    return tuple(items)


# ---------------------------------------------------------------- subcommands


def cmd_collect(args, cfg, cfg_hash):
    from .sim.dataset import collect_dataset, collection_suite
    from .sim.world import TRAIN_WEATHERS, load_suite

    r = Resolver(args, cfg)
    seed = r.get("seed", 0, int)
    profile = r.get("profile", "desk")
    jobs = r.get("jobs", 1, int)
    town = r.get("town", 1, int)
    weathers = r.get("weathers", ",".join(TRAIN_WEATHERS))
    n_nav = r.get("n_navigation", 7, int)
    n_dyn = r.get("n_dynamic", 2, int)
    max_seconds = r.get("max_seconds", None, float)
    suite_file = r.get("suite", None)
    if town not in (1, 2):
        raise UsageError(f"town must be 1 or 2, got {town}")
    if suite_file:
        if not Path(suite_file).is_file():
            raise UsageError(f"episode suite not found: {suite_file}")
        episodes = load_suite(suite_file)
    else:
        episodes = collection_suite(n_nav, n_dyn, town, _weathers(weathers))
    out = out_dir(args, "dataset")
    manifest = collect_dataset(episodes, out, seed, profile, max_seconds, jobs)
    print(f"collected {manifest['n_records']} records from {len(episodes)} episodes into {out}")
    return out, r, {"seed": seed}, {"dataset": out, "manifest": out / "manifest.json"}


def cmd_preprocess(args, cfg, cfg_hash):
    from .data import preprocess_dataset
    from .depth import RangeSpec

    r = Resolver(args, cfg)
    profile = r.get("profile", "desk")
    rs = RangeSpec(r.get("min_m", 1.0, float), r.get("max_m", 100.0, float), r.get("step_m", 0.04, float))
    skip = bool(args.skip_corrupt) or cfg.get("skip_corrupt", "false").lower() in ("1", "true", "yes")
    r.resolved["skip_corrupt"] = skip
    out = out_dir(args, "processed")
    m = preprocess_dataset(args.dataset, out, profile, rs, skip_corrupt=skip)
    print(f"preprocessed {m['n_records']} records ({m['skipped']} skipped) at "
          f"{m['input_size'][0]}x{m['input_size'][1]} into {out}")
    return out, r, {}, {"processed": out, "source": args.dataset}


def cmd_train(args, cfg, cfg_hash):
    from .autodiff import load_snapshot, snapshot_checksum
    from .benchmark import validation_score, validation_suites
    from .data import ProcessedDataset
    from .model import ModelConfig
    from .sim.episode import ModelPolicy
    from .training import TrainConfig, select_best_of_runs, training_run, vp_table

    r = Resolver(args, cfg)
    profile = r.get("profile", "desk")
    fusion = r.get("fusion", "early")
    runs = r.get("runs", None, int)
    seed = r.get("seed", 0, int)
    jobs = r.get("jobs", 1, int)
    n_val = r.get("validation_episodes", 25, int)
    overrides = {k: v for k, v in cfg.items() if k in TrainConfig.__dataclass_fields__}
    try:
        tcfg = TrainConfig.from_text("\n".join(f"{k} = {v}" for k, v in overrides.items()),
                                     TrainConfig.for_profile(profile))
    except ValueError as exc:
        raise UsageError(f"train config: {exc}") from exc
    repl = {"seed": seed}
    if runs is not None:
        repl["runs"] = runs
    if args.iterations is not None:
        repl["iterations"] = args.iterations
    try:
        tcfg = dataclasses.replace(tcfg, **repl)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    r.resolved["train_config"] = dataclasses.asdict(tcfg)
    ds = ProcessedDataset.load(args.dataset)
    if ds.manifest.get("profile", profile) != profile:
        raise UsageError(f"dataset was preprocessed for profile {ds.manifest.get('profile')}, not {profile}")
    mcfg = ModelConfig.for_profile(fusion, profile)
    suites = validation_suites(n_val)

    def validator(model):
        return validation_score(ModelPolicy(model), suites, seed, profile, jobs, required_size=n_val)[:3]

    def progress(run, it, vals, elapsed):
        log.info("run %d iter %d lr %.2e act %.4f sp %.4f (%.0fs)", run, it, vals["lr"], vals["act"],
                 vals["sp"], elapsed)

    out = out_dir(args, f"train_{mcfg.fusion.value}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.txt").write_text(tcfg.to_text())
    metas = [training_run(ds, tcfg, k, validator, mcfg, out, progress) for k in range(1, tcfg.runs + 1)]
    best = select_best_of_runs(metas, tcfg.runs)
    checksum = snapshot_checksum(load_snapshot(best.params))
    table = vp_table({mcfg.fusion.value: [m.vp for m in metas]})
    (out / "vp_table.txt").write_text(table)
    summary = {"best": best.to_dict(), "runs": [m.to_dict() for m in metas], "checksum": checksum,
               "checkpoint": str(Path(best.params).parent)}
    (out / "best.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(table, end="")
    print(f"best: run {best.run} iteration {best.iteration} V_P {best.vp:.2f} -> {Path(best.params).parent}")
    return out, r, {"seed": seed, "runs": list(range(1, tcfg.runs + 1))}, \
        {"best": Path(best.params).parent, "summary": out / "best.json", "vp_table": out / "vp_table.txt"}


def load_policy(ref: str):
    from .model import CILModel
    from .sim.episode import ModelPolicy
    from .sim.expert import ExpertPolicy

    if ref == "expert":
        return ExpertPolicy(), {"label": "expert", "checkpoint": None}
    p = Path(ref)
    if p.is_file() and p.name == "best.json":
        p = Path(json.loads(p.read_text())["checkpoint"])
    if not (p / "manifest").is_file():
        raise UsageError(f"not a checkpoint directory: {ref}")
    model = CILModel.load(p)
    return ModelPolicy(model), {"label": model.cfg.fusion.value, "checkpoint": str(p),
                                "checksum": model.checksum(), "profile": model.cfg.profile}


def cmd_bench(args, cfg, cfg_hash):
    from .benchmark import BenchmarkReport, canonical_blocks, emit_report, run_block
    from .sim.world import TASKS

    r = Resolver(args, cfg)
    repeats = r.get("repeats", 3, int)
    seed = r.get("seed", 0, int)
    jobs = r.get("jobs", 1, int)
    profile = r.get("profile", "desk")
    n = r.get("episodes", 25, int)
    if repeats < 1 or n < 1:
        raise UsageError("repeats and episodes must be >= 1")
    policy, ref = load_policy(args.checkpoint)
    if ref.get("profile", profile) != profile:
        raise UsageError(f"checkpoint is for profile {ref['profile']}, not {profile}")
    blocks = {}
    for block in canonical_blocks(n):
        blocks[block.name] = {}
        for task in TASKS:
            tr = run_block(policy, block, task, repeats, seed, profile=profile, jobs=jobs)
            blocks[block.name][task] = tr
            log.info("%s / %s: %.2f +- %.2f", block.name, task, tr.mean, tr.std)
    report = BenchmarkReport(ref, blocks, repeats, seed)
    out = out_dir(args, "bench")
    paths = emit_report(report, out, plot=args.plot)
    print(Path(paths["txt"]).read_text(), end="")
    return out, r, {"root_seed": seed, "repeat_seeds": blocks[canonical_blocks(n)[0].name][TASKS[0]].seeds}, paths


def cmd_report(args, cfg, cfg_hash):
    from .benchmark import comparison_csv, comparison_table, parse_report, plot_reports

    reports = [parse_report(p) for p in args.reports]
    out = out_dir(args, "report")
    out.mkdir(parents=True, exist_ok=True)
    text = comparison_table(reports)
    (out / "comparison.txt").write_text(text)
    (out / "comparison.csv").write_text(comparison_csv(reports))
    arts = {"txt": out / "comparison.txt", "csv": out / "comparison.csv"}
    if args.plot:
        p = plot_reports(reports, out / "comparison.png")
        if p is not None:
            arts["png"] = p
    print(text, end="")
    return out, Resolver(args, cfg), {}, arts


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--profile", choices=("desk", "paper"))
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--out", help="output directory (default: $FUSION_PILOT_HOME/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fusion-pilot", description="Multimodal end-to-end driving toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", parents=[common], help="record expert demonstrations")
    c.add_argument("--suite", help="episode suite JSON (overrides town/weathers)")
    c.add_argument("--town", type=int)
    c.add_argument("--weathers", help="comma-separated weather tags")
    c.add_argument("--max-seconds", dest="max_seconds", type=float)

    pp = sub.add_parser("preprocess", parents=[common], help="realism pipeline + crop + remap")
    pp.add_argument("dataset")
    pp.add_argument("--skip-corrupt", action="store_true")

    t = sub.add_parser("train", parents=[common], help="train runs and select by V_P")
    t.add_argument("dataset")
    t.add_argument("--fusion", choices=FUSION_CHOICES)
    t.add_argument("--runs", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--validation-episodes", dest="validation_episodes", type=int)

    b = sub.add_parser("bench", parents=[common], help="run the four-block benchmark")
    b.add_argument("checkpoint", help="checkpoint directory, best.json, or 'expert'")
    b.add_argument("--repeats", type=int)
    b.add_argument("--episodes", type=int, help="episodes per weather (default 25)")
    b.add_argument("--plot", action="store_true")

    r = sub.add_parser("report", parents=[common], help="compare benchmark reports")
    r.add_argument("reports", nargs="+")
    r.add_argument("--plot", action="store_true")
    return p


COMMANDS = {"collect": cmd_collect, "preprocess": cmd_preprocess, "train": cmd_train,
            "bench": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .benchmark import ReportError
    from .data import DatasetError
    from .training import TrainingError

    try:
        cfg, cfg_hash = read_flat_config(args.config) if args.config else ({}, None)
        out, resolver, seeds, artifacts = COMMANDS[args.command](args, cfg, cfg_hash)
        write_manifest(out, args.command, argv, cfg_hash, resolver.resolved, seeds, artifacts)
    except UsageError as exc:
        print(f"fusion-pilot {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, TrainingError, ReportError, FileExistsError, OSError, ValueError) as exc:
        print(f"fusion-pilot {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
