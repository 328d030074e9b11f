"""Sample records, the on-disk dataset layout, and frame preprocessing.

Raw layout (written by collection)::

    <root>/manifest.json
    <root>/records.jsonl
    <root>/episodes/<id>/frames/<n>_<camera>.rgb    PNG, 8-bit RGB
    <root>/episodes/<id>/frames/<n>_<camera>.depth  PNG, 16-bit counts of 4 cm
    <root>/episodes/<id>/frames/<n>_<camera>.sem    PNG, 8-bit 12-class labels

Processed layout: ``manifest.json`` (``processed: true``), ``records.jsonl``
and ``arrays.npz`` holding network-resolution channels for every record.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import depth as dp
from .model import Command
from .sensors import png_units_to_depth, process_views

log = logging.getLogger(__name__)

DATASET_VERSION = 1
CAMERA_IDS = ("center", "left30", "right30")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    frame: str  # "<episode>/<n>"
    camera: str
    files: dict  # modality -> relative path
    speed: float  # km/h
    steer: float
    throttle: float
    brake: float
    command: int
    episode: str
    weather: str
    town: int

    def __post_init__(self):
        if self.camera not in CAMERA_IDS:
            raise ValueError(f"unknown camera {self.camera!r}")
        Command(self.command)
        if not (-1 <= self.steer <= 1 and 0 <= self.throttle <= 1 and 0 <= self.brake <= 1):
            raise ValueError(f"{self.frame}: action outside bounds")

    @property
    def action(self) -> np.ndarray:
        return np.array([self.steer, self.throttle, self.brake])

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        return cls(**json.loads(line))


def encode_png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False, compress_level=1)
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_manifest(root) -> dict:
    p = Path(root) / "manifest.json"
    if not p.exists():
        raise DatasetError(f"{root}: no manifest.json")
    m = json.loads(p.read_text())
    if m.get("version") != DATASET_VERSION:
        raise DatasetError(f"{root}: unsupported dataset version {m.get('version')}")
    if m.get("status", "complete") != "complete":
        raise DatasetError(f"{root}: dataset is {m.get('status')}, refusing to use it")
    return m


def read_records(root) -> list:
    with open(Path(root) / "records.jsonl") as fh:
        return [SampleRecord.from_json(line) for line in fh if line.strip()]


def load_raw_frame(root, rec: SampleRecord):
    root = Path(root)
    rgb = decode_png((root / rec.files["rgb"]).read_bytes())
    depth_m = png_units_to_depth(decode_png((root / rec.files["depth"]).read_bytes()))
    sem = decode_png((root / rec.files["sem"]).read_bytes())
    return rgb, depth_m, sem


def preprocess_dataset(raw_dir, out_dir, profile: str = "desk", r: dp.RangeSpec = dp.RangeSpec(),
                       skip_corrupt: bool = False) -> dict:
    """Run the realism pipeline, crop/downscale and semantic remap on every frame."""
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    manifest = read_manifest(raw_dir)
    if manifest.get("processed"):
        raise DatasetError(f"{raw_dir}: already processed")
    if (out_dir / "manifest.json").exists():
        raise DatasetError(f"{out_dir}: already processed, remove it to redo the pipeline")
    if profile not in dp.PROFILES:
        raise DatasetError(f"unknown profile {profile!r}")
    size = dp.PROFILES[profile]
    w, h = size
    records = read_records(raw_dir)
    n = len(records)
    rgb = np.zeros((n, h, w, 3), np.uint8)
    depth = np.zeros((n, h, w), np.float16)
    sem = np.zeros((n, h, w), np.uint8)
    keep = np.ones(n, dtype=bool)
    n_classes = len(dp.TARGET_CLASSES)
    for i, rec in enumerate(records):
        try:
            frame_rgb, frame_d, frame_s = load_raw_frame(raw_dir, rec)
            views = process_views(frame_rgb, frame_d, None, size=size, modalities=("rgb", "depth"), r=r)
            labels = dp.downscale_labels(dp.semantic_remap(frame_s), size, n_classes)
        except (OSError, ValueError) as exc:
            if not skip_corrupt:
                raise DatasetError(f"corrupt frame {rec.frame} ({rec.camera}): {exc}") from exc
            log.warning("skipping corrupt frame %s/%s: %s", rec.frame, rec.camera, exc)
            keep[i] = False
            continue
        rgb[i] = views["rgb"].astype(np.uint8)
        depth[i] = views["depth"][..., 0]
        sem[i] = labels
    records = [rec for rec, k in zip(records, keep) if k]
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(out_dir / "arrays.npz", rgb=rgb[keep], depth=depth[keep], sem=sem[keep],
             speed=np.array([x.speed for x in records], np.float32),
             action=np.array([x.action for x in records], np.float32).reshape(-1, 3),
             command=np.array([x.command for x in records], np.int8),
             camera=np.array([CAMERA_IDS.index(x.camera) for x in records], np.int8))
    with open(out_dir / "records.jsonl", "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    out = dict(manifest)
    out.update(processed=True, profile=profile, input_size=list(size), n_records=len(records),
               skipped=int((~keep).sum()), range={"min_m": r.min_m, "max_m": r.max_m, "step_m": r.step_m},
               source_manifest_sha256=file_sha256(raw_dir / "manifest.json"),
               arrays_sha256=file_sha256(out_dir / "arrays.npz"))
    (out_dir / "manifest.json").write_text(json.dumps(out, indent=1, sort_keys=True))
    return out


class ProcessedDataset:
    """Network-resolution arrays plus per-record metadata, held in memory."""

    def __init__(self, rgb, depth, sem, speed, action, command, camera, manifest=None):
        self.rgb = rgb
        self.depth = depth
        self.sem = sem
        self.speed = np.asarray(speed, np.float64)
        self.action = np.asarray(action, np.float64)
        self.command = np.asarray(command, np.int64)
        self.camera = np.asarray(camera, np.int64)
        self.manifest = manifest or {}

    def __len__(self):
        return len(self.command)

    @classmethod
    def load(cls, root) -> "ProcessedDataset":
        m = read_manifest(root)
        if not m.get("processed"):
            raise DatasetError(f"{root}: dataset has not been preprocessed")
        with np.load(Path(root) / "arrays.npz") as z:
            return cls(z["rgb"], z["depth"], z["sem"], z["speed"], z["action"], z["command"],
                       z["camera"], m)

    def perception(self, idx, modalities) -> dict:
        out = {}
        if "rgb" in modalities:
            out["rgb"] = self.rgb[idx].astype(np.float64)
        if "depth" in modalities:
            out["depth"] = self.depth[idx].astype(np.float64)[..., None]
        if "ss" in modalities:
            out["ss"] = dp.one_hot_semantic(self.sem[idx]).astype(np.float64)
        return out

    def command_counts(self) -> dict:
        return {Command(c): int((self.command == c).sum()) for c in range(4)}
