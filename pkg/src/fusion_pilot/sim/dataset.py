"""Expert demonstration collection into the raw dataset layout."""

from __future__ import annotations

import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ..data import CAMERA_IDS, DATASET_VERSION, SampleRecord, encode_png, file_sha256
from ..sensors import depth_to_png_units
from .episode import run_episode
from .expert import ExpertPolicy
from .world import TRAIN_WEATHERS, EpisodeSpec, make_suite

COLLECTION_SUITE_SEED = 100


def _episode_id(i: int, ep: EpisodeSpec) -> str:
    return f"ep{i:04d}-t{ep.town}-{ep.task}-{ep.weather}-{ep.index:02d}"


def _collect_one(args):
    i, ep_dict, root, seed, profile, max_seconds = args
    ep = EpisodeSpec.from_dict(ep_dict)
    eid = _episode_id(i, ep)
    frame_dir = Path(root) / "episodes" / eid / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    lines = []

    def record(k, ctx, action, frames):
        for cam in CAMERA_IDS:
            f = frames[cam]
            files = {}
            for mod, arr in (("rgb", f.rgb), ("depth", depth_to_png_units(f.depth)), ("sem", f.semantic)):
                rel = f"episodes/{eid}/frames/{k:05d}_{cam}.{mod}"
                (Path(root) / rel).write_bytes(encode_png(arr))
                files[mod] = rel
            rec = SampleRecord(f"{eid}/{k:05d}", cam, files, round(ctx.state.speed_kmh, 6),
                               round(action.steer, 6), round(action.throttle, 6), round(action.brake, 6),
                               int(ctx.command), eid, ep.weather, ep.town)
            lines.append(rec.to_json())

    budget = ep.time_budget if max_seconds is None else min(ep.time_budget, max_seconds)
    res = run_episode(ExpertPolicy(), ep, seed, profile, time_budget=budget, record=record)
    return eid, lines, res.to_dict()


def collection_suite(n_navigation: int = 7, n_dynamic: int = 2, town: int = 1, weathers=TRAIN_WEATHERS,
                     seed: int = COLLECTION_SUITE_SEED) -> list:
    """Demonstration routes: static and dynamic navigation under every training weather."""
    return (make_suite(town, "navigation", weathers, n_navigation, seed) +
            make_suite(town, "navigation-dynamic", weathers, n_dynamic, seed))


def collect_dataset(episodes, out_dir, seed: int = 0, profile: str = "desk", max_seconds: float | None = None,
                    jobs: int = 1) -> dict:
    """Drive every episode with the expert, recording all three cameras at the control rate.

    Returns the dataset manifest (also written to ``out_dir/manifest.json``).
    A failure leaves a manifest with ``status: incomplete`` that loaders refuse.
    """
    root = Path(out_dir)
    if (root / "manifest.json").exists():
        raise FileExistsError(f"{root} already holds a dataset")
    root.mkdir(parents=True, exist_ok=True)
    jobs_in = [(i, ep.to_dict(), str(root), seed, profile, max_seconds) for i, ep in enumerate(episodes)]
    manifest = {"version": DATASET_VERSION, "processed": False, "profile": profile, "seed": seed,
                "status": "incomplete", "episodes": [], "weathers": sorted({e.weather for e in episodes}),
                "towns": sorted({e.town for e in episodes}), "cameras": list(CAMERA_IDS),
                "center_camera": "center", "control_hz": 10.0}
    try:
        if jobs > 1:
            with ProcessPoolExecutor(jobs) as pool:
                outs = list(pool.map(_collect_one, jobs_in))
        else:
            outs = [_collect_one(a) for a in jobs_in]
        with open(root / "records.jsonl", "w") as fh:
            n = 0
            for eid, lines, res in outs:
                for line in lines:
                    fh.write(line + "\n")
                n += len(lines)
                manifest["episodes"].append({"id": eid, "records": len(lines), "success": res["success"],
                                             "driven_km": res["driven_km"]})
        manifest.update(status="complete", n_records=n, records_sha256=file_sha256(root / "records.jsonl"))
    finally:
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def remove_dataset(root):
    shutil.rmtree(root, ignore_errors=True)
