"""Losses, branch-balanced minibatches, the optimisation schedule and
checkpoint selection by validation score."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .benchmark import compute_vp
from .data import CAMERA_IDS, ProcessedDataset, SampleRecord
from .model import CILModel, Command, ModelConfig, modalities

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 120
    learning_rate: float = 0.0002
    halving_period: int = 50000
    iterations: int = 500000
    checkpoint_every: int = 100000
    beta: float = 0.95
    w_steer: float = 0.5
    w_throttle: float = 0.45
    w_brake: float = 0.05
    lateral_correction: float = 0.3
    runs: int = 5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = False
    log_every: int = 100

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if min(self.weights) < 0:
            raise ValueError("action loss weights must be non-negative")
        if self.batch_size <= 0 or self.batch_size % 4:
            raise ValueError(f"batch_size must be a positive multiple of 4, got {self.batch_size}")
        for name in ("halving_period", "iterations", "checkpoint_every", "runs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def weights(self) -> tuple:
        return (self.w_steer, self.w_throttle, self.w_brake)

    @classmethod
    def for_profile(cls, profile: str = "desk", **overrides) -> "TrainConfig":
        if profile == "desk":
            base = cls(batch_size=32, halving_period=2000, iterations=20000, checkpoint_every=4000)
        elif profile == "paper":
            base = cls()
        else:
            raise ValueError(f"unknown profile {profile!r}")
        return dataclasses.replace(base, **overrides) if overrides else base

    # flat ``key = value`` text, one entry per line
    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {n}: unknown key {key!r}")
            kind = types[key]
            if kind == "bool":
                values[key] = val.lower() in ("1", "true", "yes")
            elif kind == "int":
                values[key] = int(val)
            else:
                values[key] = float(val)
        return dataclasses.replace(base, **values)


# ---------------------------------------------------------------- losses


def action_loss(a, a_gt, w=(0.5, 0.45, 0.05)) -> float:
    a, a_gt, w = (np.asarray(v, dtype=np.float64) for v in (a, a_gt, w))
    if a.shape[-1] != 3 or a_gt.shape != a.shape or w.shape != (3,):
        raise ValueError("action_loss expects triplets")
    return float(np.abs(w * (a - a_gt)).sum())


def speed_loss(s, s_gt) -> float:
    return float(abs(float(s) - float(s_gt)))


def total_loss(l_act: float, l_sp: float, beta: float) -> float:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    return beta * l_act + (1.0 - beta) * l_sp


def learning_rate_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.learning_rate * 0.5 ** (iteration // cfg.halving_period)


# ---------------------------------------------------------------- data


def balanced_minibatch(commands, batch_size: int, rng) -> np.ndarray:
    """Indices with exactly ``batch_size / 4`` samples per command."""
    if isinstance(commands, ProcessedDataset):
        commands = commands.command
    commands = np.asarray(commands)
    if batch_size % 4:
        raise ValueError("batch_size must be divisible by 4")
    q = batch_size // 4
    out = []
    for c in Command:
        pool = np.nonzero(commands == int(c))[0]
        if len(pool) < q:
            raise TrainingError(f"command {c.label} has {len(pool)} samples, needs {q} per minibatch")
        out.append(rng.choice(pool, q, replace=False))
    return np.concatenate(out)


def lateral_view_correction(sample: SampleRecord, correction: float = 0.3) -> SampleRecord:
    if sample.camera == "center":
        return sample
    delta = correction if sample.camera == "left30" else -correction
    return dataclasses.replace(sample, steer=float(np.clip(sample.steer + delta, -1.0, 1.0)))


def corrected_actions(action: np.ndarray, camera: np.ndarray, correction: float) -> np.ndarray:
    """Vectorised :func:`lateral_view_correction` over camera ids."""
    out = np.array(action, dtype=np.float64, copy=True)
    delta = np.select([camera == CAMERA_IDS.index("left30"), camera == CAMERA_IDS.index("right30")],
                      [correction, -correction], 0.0)
    out[:, 0] = np.clip(out[:, 0] + delta, -1.0, 1.0)
    return out


@dataclass
class Minibatch:
    perception: dict
    speed: np.ndarray  # km/h
    action: np.ndarray  # (N, 3) targets after view correction
    command: np.ndarray


def make_minibatch(ds: ProcessedDataset, idx, mods, targets: np.ndarray) -> Minibatch:
    return Minibatch(ds.perception(idx, mods), ds.speed[idx], targets[idx], ds.command[idx])


# ---------------------------------------------------------------- optimisation


def loss_graph(model: CILModel, mb: Minibatch, cfg: TrainConfig, train: bool = True):
    """Build (total, action, speed) loss tensors; both terms are batch means."""
    groups, speeds = model.graph(mb.perception, mb.speed, mb.command, train=train)
    n = len(mb.command)
    act_terms = [ad.abs_diff_sum(t, mb.action[rows], cfg.weights, name=f"loss.act{c}")
                 for c, (rows, t) in groups.items()]
    l_act = act_terms[0]
    for t in act_terms[1:]:
        l_act = ad.add(l_act, t, name="loss.act_sum")
    l_act = ad.scale(l_act, 1.0 / n, name="loss.act")
    target = (mb.speed / model.cfg.speed_norm).reshape(-1, 1)
    sp_terms = [ad.abs_diff_sum(s, target, name=f"loss.sp{k}") for k, s in enumerate(speeds)]
    l_sp = sp_terms[0]
    for t in sp_terms[1:]:
        l_sp = ad.add(l_sp, t, name="loss.sp_sum")
    l_sp = ad.scale(l_sp, 1.0 / (n * len(sp_terms)), name="loss.sp")
    total = ad.add(ad.scale(l_act, cfg.beta), ad.scale(l_sp, 1.0 - cfg.beta), name="loss.total")
    return total, l_act, l_sp


def make_optimizer(model: CILModel, cfg: TrainConfig) -> ad.Adam:
    return ad.Adam(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def train_step(model: CILModel, mb: Minibatch, opt: ad.Adam, cfg: TrainConfig, iteration: int) -> dict:
    for p in model.parameters():
        p.zero_grad()
    total, l_act, l_sp = loss_graph(model, mb, cfg)
    values = {"total": float(total.data), "act": float(l_act.data), "sp": float(l_sp.data)}
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingError(f"non-finite loss at iteration {iteration}: {values}")
    ad.backward(total)
    lr = learning_rate_at(iteration, cfg)
    opt.step(lr)
    values["lr"] = lr
    return values


# ---------------------------------------------------------------- selection


@dataclass
class CheckpointMeta:
    iteration: int
    v_w: float
    v_t: float
    v_wt: float
    vp: float
    params: str
    run: int
    valid: bool = True

    def __post_init__(self):
        if self.valid and abs(self.vp - compute_vp(self.v_w, self.v_t, self.v_wt)) > 1e-9:
            raise ValueError("V_P does not match its sub-scores")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def select_best_checkpoint(metas) -> CheckpointMeta:
    """Highest V_P; on ties the later iteration wins."""
    valid = [m for m in metas if m.valid]
    if not valid:
        raise TrainingError("no valid checkpoints")
    return max(valid, key=lambda m: (m.vp, m.iteration))


def select_best_of_runs(metas, runs: int | None = None) -> CheckpointMeta:
    """Highest V_P across runs; on ties the lowest run index wins."""
    metas = list(metas)
    if runs is not None and len(metas) != runs:
        raise ValueError(f"expected {runs} run results, got {len(metas)}")
    valid = [m for m in metas if m is not None and m.valid]
    if not valid:
        raise TrainingError("every training run is invalid")
    return max(valid, key=lambda m: (m.vp, -m.run))


def run_seed(seed: int, run: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(run), 0x7261696E])


def training_run(ds: ProcessedDataset, cfg: TrainConfig, run: int, validator, model_cfg: ModelConfig,
                 out_dir, progress=None) -> CheckpointMeta:
    """One complete run; returns the checkpoint with the highest validation score.

    ``validator(model)`` returns ``(V_w, V_t, V_wt)``. Checkpoints land in
    ``out_dir/run_<run>/iter_<n>/``.
    """
    run_dir = Path(out_dir) / f"run_{run}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "train_config.txt").write_text(cfg.to_text())
    ss = run_seed(cfg.seed, run)
    model_seed, batch_seed = ss.spawn(2)
    model = CILModel(model_cfg, seed=int(model_seed.generate_state(1)[0]))
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(batch_seed)
    mods = modalities(model_cfg.fusion)
    targets = corrected_actions(ds.action, ds.camera, cfg.lateral_correction)
    metas = []
    t0 = time.time()
    with open(run_dir / "train_log.jsonl", "a") as logf:
        for it in range(cfg.iterations):
            idx = balanced_minibatch(ds.command, cfg.batch_size, rng)
            vals = train_step(model, make_minibatch(ds, idx, mods, targets), opt, cfg, it)
            done = it + 1
            if done % cfg.log_every == 0 or done == cfg.iterations:
                logf.write(json.dumps({"iteration": done, "lr": vals["lr"], "l_act": vals["act"],
                                       "l_sp": vals["sp"], "total": vals["total"]}) + "\n")
                logf.flush()
                if progress:
                    progress(run, done, vals, time.time() - t0)
            if done % cfg.checkpoint_every == 0 or done == cfg.iterations:
                if metas and metas[-1].iteration == done:
                    continue
                ck = run_dir / f"iter_{done}"
                model.save(ck, {"iteration": done, "run": run})
                try:
                    v_w, v_t, v_wt = validator(model)
                    meta = CheckpointMeta(done, v_w, v_t, v_wt, compute_vp(v_w, v_t, v_wt),
                                          str(ck / "params"), run)
                except Exception as exc:
                    log.error("validator failed for run %d at %d: %s", run, done, exc)
                    (run_dir / "INVALID").write_text(f"validator failed at iteration {done}: {exc}\n")
                    return CheckpointMeta(done, 0.0, 0.0, 0.0, 0.0, str(ck / "params"), run, valid=False)
                (ck / "vp.json").write_text(json.dumps(meta.to_dict(), indent=1, sort_keys=True))
                metas.append(meta)
    best = select_best_checkpoint(metas)
    (run_dir / "best.json").write_text(json.dumps(best.to_dict(), indent=1, sort_keys=True))
    return best


def vp_table(rows: dict) -> str:
    """Render ``{mode: [V_P per run]}`` as a runs x modes text table."""
    modes = list(rows)
    n = max(len(v) for v in rows.values()) if rows else 0
    head = "Run  " + "".join(f"{m:>10}" for m in modes)
    lines = [head, "-" * len(head)]
    for r in range(n):
        cells = "".join(f"{rows[m][r]:>10.1f}" if r < len(rows[m]) else f"{'-':>10}" for m in modes)
        lines.append(f"{r + 1:<5}" + cells)
    return "\n".join(lines) + "\n"
