"""Driving benchmark: condition blocks, success rates, validation score,
infraction metrics and report files."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim.dynamics import INFRACTION_KINDS
from .sim.episode import run_episode
from .sim.world import NEW_WEATHERS, TASKS, TRAIN_WEATHERS, make_suite

REPORT_VERSION = 1
EPISODES_PER_WEATHER = 25
BENCH_SUITE_SEED = 300
VALIDATION_SUITE_SEED = 200


class ReportError(ValueError):
    pass


def success_rate(e_s: int, e_t: int) -> float:
    if e_t <= 0:
        raise ValueError("success_rate needs E_T > 0")
    if not 0 <= e_s <= e_t:
        raise ValueError(f"success_rate needs 0 <= E_S <= E_T, got {e_s}/{e_t}")
    return 100.0 * e_s / e_t


def compute_vp(v_w: float, v_t: float, v_wt: float) -> float:
    for name, v in (("V_w", v_w), ("V_t", v_t), ("V_wt", v_wt)):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"{name} = {v} outside [0, 100]")
    return 0.25 * v_w + 0.25 * v_t + 0.5 * v_wt


def split_seed(root: int, *keys: int) -> int:
    """Child seed for repeat/stream ``keys`` under ``root`` (SeedSequence hashing)."""
    return int(np.random.SeedSequence([int(root), *map(int, keys)]).generate_state(1)[0])


def sample_std(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1)) if len(v) > 1 else 0.0


# ---------------------------------------------------------------- blocks


@dataclass(frozen=True)
class ConditionBlock:
    name: str
    town: int
    weathers: tuple
    episodes_per_weather: int = EPISODES_PER_WEATHER

    @property
    def e_t(self) -> int:
        return self.episodes_per_weather * len(self.weathers)

    def suite(self, task: str, seed: int = BENCH_SUITE_SEED):
        return make_suite(self.town, task, self.weathers, self.episodes_per_weather, seed)


def canonical_blocks(episodes_per_weather: int = EPISODES_PER_WEATHER) -> tuple:
    n = episodes_per_weather
    return (ConditionBlock("training-conditions", 1, tuple(TRAIN_WEATHERS), n),
            ConditionBlock("new-town", 2, tuple(TRAIN_WEATHERS), n),
            ConditionBlock("new-weather", 1, tuple(NEW_WEATHERS), n),
            ConditionBlock("new-town-and-weather", 2, tuple(NEW_WEATHERS), n))


BLOCK_NAMES = tuple(b.name for b in canonical_blocks())


# ---------------------------------------------------------------- infractions


def infraction_metrics(results, perfect_km: float | None = None) -> dict:
    """Km driven per infraction of each kind.

    A kind with no events reports ``km_per = driven_km`` with ``open_bound``
    set, meaning "more than the total driven distance".
    """
    results = list(results)
    driven = float(sum(r.driven_km for r in results))
    if perfect_km is None:
        perfect_km = float(sum(r.route_km for r in results))
    out = {"driven_km": driven, "perfect_km": perfect_km, "kinds": {}}
    for k in INFRACTION_KINDS:
        n = sum(1 for r in results for e in r.infractions if e.kind == k)
        out["kinds"][k] = {"count": n, "km_per": driven / n if n else driven, "open_bound": n == 0}
    return out


def format_km_per(entry: dict) -> str:
    return f"> {entry['km_per']:.2f}" if entry["open_bound"] else f"{entry['km_per']:.2f}"


# ---------------------------------------------------------------- running


@dataclass
class TaskReport:
    task: str
    block: str
    e_t: int
    successes: list  # E_S per repeat
    seeds: list
    infractions: dict
    episodes: list = field(default_factory=list)  # serialised EpisodeResults (optional)

    @property
    def rates(self) -> list:
        return [success_rate(s, self.e_t) for s in self.successes]

    @property
    def mean(self) -> float:
        return float(np.mean(self.rates))

    @property
    def std(self) -> float:
        return sample_std(self.rates)

    def to_dict(self, with_episodes: bool = False) -> dict:
        d = {"task": self.task, "block": self.block, "e_t": self.e_t, "successes": list(self.successes),
             "seeds": list(self.seeds), "rates": self.rates, "mean": self.mean, "std": self.std,
             "infractions": self.infractions}
        if with_episodes:
            d["episodes"] = self.episodes
        return d

    @classmethod
    def from_dict(cls, d) -> "TaskReport":
        return cls(d["task"], d["block"], d["e_t"], list(d["successes"]), list(d["seeds"]),
                   d["infractions"], d.get("episodes", []))


def _run_one(args):
    policy, ep, seed, profile = args
    return run_episode(policy, ep, seed, profile)


def run_episodes(policy, episodes, seed: int, profile: str = "desk", jobs: int = 1) -> list:
    work = [(policy, ep, seed, profile) for ep in episodes]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_run_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    return [_run_one(w) for w in work]


def run_block(policy, block: ConditionBlock, task: str, repeats: int = 3, root_seed: int = 0,
              suite=None, profile: str = "desk", jobs: int = 1, keep_episodes: bool = False) -> TaskReport:
    """Run every episode of the block/task suite ``repeats`` times.

    Start/goal pairs are fixed by the suite; each repeat varies only the
    agent and sensor-noise seed, derived from ``root_seed``.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    suite = block.suite(task) if suite is None else list(suite)
    if not suite:
        raise ReportError(f"no episode suite for {block.name}/{task}")
    if len(suite) != block.e_t:
        raise ReportError(f"{block.name}/{task}: suite has {len(suite)} episodes, block expects {block.e_t}")
    successes, seeds, every = [], [], []
    for r in range(repeats):
        seed = split_seed(root_seed, r)
        res = run_episodes(policy, suite, seed, profile, jobs)
        successes.append(sum(x.success for x in res))
        seeds.append(seed)
        every.extend(res)
    return TaskReport(task, block.name, block.e_t, successes, seeds, infraction_metrics(every),
                      [x.to_dict() for x in every] if keep_episodes else [])


def validation_suites(n: int = EPISODES_PER_WEATHER, task: str = "one-turn", seed: int = VALIDATION_SUITE_SEED):
    """The three held-out suites behind V_w, V_t and V_wt."""
    return (make_suite(1, task, ["soft-rainy-sunset"], n, seed),
            make_suite(2, task, ["clear-noon"], n, seed),
            make_suite(2, task, ["soft-rainy-sunset"], n, seed))


def validation_score(policy, suites=None, seed: int = 0, profile: str = "desk", jobs: int = 1,
                     required_size: int | None = EPISODES_PER_WEATHER) -> tuple:
    """Return ``(V_w, V_t, V_wt, V_P)``."""
    suites = validation_suites() if suites is None else suites
    scores = []
    for s in suites:
        if required_size is not None and len(s) != required_size:
            raise ReportError(f"validation suite has {len(s)} episodes, expected {required_size}")
        res = run_episodes(policy, s, seed, profile, jobs)
        scores.append(success_rate(sum(x.success for x in res), len(res)))
    return (*scores, compute_vp(*scores))


# ---------------------------------------------------------------- reports


@dataclass
class BenchmarkReport:
    model: dict
    blocks: dict  # block name -> task -> TaskReport
    repeats: int
    root_seed: int
    version: int = REPORT_VERSION

    def check_complete(self):
        for b in BLOCK_NAMES:
            if b not in self.blocks:
                raise ReportError(f"report lacks block {b}")
            for t in TASKS:
                if t not in self.blocks[b]:
                    raise ReportError(f"report lacks task {t} in block {b}")

    def to_dict(self) -> dict:
        return {"version": self.version, "model": self.model, "repeats": self.repeats,
                "root_seed": self.root_seed,
                "blocks": {b: {t: tr.to_dict() for t, tr in tasks.items()} for b, tasks in self.blocks.items()}}

    @classmethod
    def from_dict(cls, d) -> "BenchmarkReport":
        if d.get("version") != REPORT_VERSION:
            raise ReportError(f"unsupported report version {d.get('version')}")
        blocks = {b: {t: TaskReport.from_dict(tr) for t, tr in tasks.items()} for b, tasks in d["blocks"].items()}
        return cls(d["model"], blocks, d["repeats"], d["root_seed"], d["version"])


def _label(report: BenchmarkReport) -> str:
    return str(report.model.get("label") or report.model.get("fusion") or "model")


def _cell(tr: TaskReport, repeats: int) -> str:
    if repeats == 1:
        return f"{tr.mean:.2f}"
    return f"{tr.mean:.2f} ± {tr.std:.2f}"


def comparison_rows(reports) -> list:
    rows = []
    for t in TASKS:
        for b in BLOCK_NAMES:
            row = {"task": t, "block": b, "E_T": reports[0].blocks[b][t].e_t}
            for rep in reports:
                row[_label(rep)] = _cell(rep.blocks[b][t], rep.repeats)
            rows.append(row)
    return rows


def comparison_table(reports) -> str:
    reports = list(reports)
    for r in reports:
        r.check_complete()
    rows = comparison_rows(reports)
    cols = list(rows[0])
    width = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    line = "  ".join(c.ljust(width[c]) for c in cols)
    out = [line, "-" * len(line)]
    out += ["  ".join(str(r[c]).ljust(width[c]) for c in cols) for r in rows]
    out.append("")
    out.append("Km per infraction (navigation-dynamic, all blocks pooled)")
    for rep in reports:
        pooled = _pooled_infractions(rep)
        cells = ", ".join(f"{k}: {format_km_per(v)}" for k, v in pooled["kinds"].items())
        out.append(f"  {_label(rep)}: driven {pooled['driven_km']:.2f} km "
                   f"(perfect {pooled['perfect_km']:.2f} km); {cells}")
    return "\n".join(out) + "\n"


def _pooled_infractions(rep: BenchmarkReport, task: str = "navigation-dynamic") -> dict:
    driven = sum(rep.blocks[b][task].infractions["driven_km"] for b in BLOCK_NAMES)
    perfect = sum(rep.blocks[b][task].infractions["perfect_km"] for b in BLOCK_NAMES)
    kinds = {}
    for k in INFRACTION_KINDS:
        n = sum(rep.blocks[b][task].infractions["kinds"][k]["count"] for b in BLOCK_NAMES)
        kinds[k] = {"count": n, "km_per": driven / n if n else driven, "open_bound": n == 0}
    return {"driven_km": driven, "perfect_km": perfect, "kinds": kinds}


def comparison_csv(reports) -> str:
    rows = comparison_rows(list(reports))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def emit_report(report: BenchmarkReport, out_dir, plot: bool = False) -> dict:
    """Write ``report.json``, ``report.txt`` and ``report.csv`` (plus an optional plot)."""
    report.check_complete()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "txt": out / "report.txt", "csv": out / "report.csv"}
    paths["json"].write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    paths["txt"].write_text(comparison_table([report]))
    paths["csv"].write_text(comparison_csv([report]))
    if plot:
        p = plot_reports([report], out / "report.png")
        if p is not None:
            paths["png"] = p
    return {k: str(v) for k, v in paths.items()}


def parse_report(path) -> BenchmarkReport:
    path = Path(path)
    try:
        rep = BenchmarkReport.from_dict(json.loads(path.read_text()))
        rep.check_complete()
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ReportError(f"{path}: malformed report ({exc})") from exc
    return rep


def plot_reports(reports, path):
    """Bar chart of mean success per task and block; needs matplotlib (optional)."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, axes = plt.subplots(1, len(BLOCK_NAMES), figsize=(4 * len(BLOCK_NAMES), 3.2), sharey=True)
    width = 0.8 / max(len(reports), 1)
    x = np.arange(len(TASKS))
    for ax, b in zip(axes, BLOCK_NAMES):
        for i, rep in enumerate(reports):
            means = [rep.blocks[b][t].mean for t in TASKS]
            stds = [rep.blocks[b][t].std for t in TASKS]
            ax.bar(x + i * width, means, width, yerr=stds, label=_label(rep))
        ax.set_title(b)
        ax.set_xticks(x + width * (len(reports) - 1) / 2, TASKS, rotation=30, fontsize=7)
        ax.set_ylim(0, 105)
    axes[0].set_ylabel("success rate (%)")
    axes[-1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
