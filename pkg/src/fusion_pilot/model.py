"""Branched conditional imitation learning networks.

``F(p, m, c) = A_c(J(P(p), M(m)))`` with four command branches and an
auxiliary speed head on the perception features. Fusion variants:

* single_rgb / single_depth / single_ss: one perception stack.
* early: RGB and depth concatenated into a 4-channel input.
* mid: one perception stack per modality, joined with M(m) before J.
* late: two complete CIL streams sharing the speed input; their selected
  branch outputs are concatenated (6 values) and mapped to the final action
  by a small fully connected head.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .depth import PROFILES


class Command(enum.IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    GO_STRAIGHT = 2
    CONTINUE = 3

    @classmethod
    def parse(cls, value) -> "Command":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls[value.replace("-", "_").upper()]
        return cls(int(value))

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


def select_branch(c) -> int:
    return int(Command.parse(c))


class FusionMode(str, enum.Enum):
    SINGLE_RGB = "single_rgb"
    SINGLE_DEPTH = "single_depth"
    SINGLE_SS = "single_ss"
    EARLY = "early"
    MID = "mid"
    LATE = "late"

    @classmethod
    def parse(cls, value) -> "FusionMode":
        aliases = {"rgb": "single_rgb", "depth": "single_depth", "d": "single_depth",
                   "ss": "single_ss"}
        if isinstance(value, cls):
            return value
        return cls(aliases.get(value, value))


# modality name -> channel count
CHANNELS = {"rgb": 3, "depth": 1, "ss": 5}


def modalities(fusion: FusionMode) -> tuple[str, ...]:
    return {
        FusionMode.SINGLE_RGB: ("rgb",),
        FusionMode.SINGLE_DEPTH: ("depth",),
        FusionMode.SINGLE_SS: ("ss",),
        FusionMode.EARLY: ("rgb", "depth"),
        FusionMode.MID: ("rgb", "depth"),
        FusionMode.LATE: ("rgb", "depth"),
    }[fusion]


@dataclass(frozen=True)
class Action:
    steer: float
    throttle: float
    brake: float

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.throttle, self.brake])


@dataclass
class Observation:
    """Perception channels (H x W x C, values in [0, 255]) plus speed in km/h."""

    perception: dict
    speed: float


@dataclass
class PolicyOutput:
    action: np.ndarray  # (N, 3) raw triplets from the selected branches
    predicted_speed: np.ndarray  # (N, streams), normalised units


@dataclass
class ModelConfig:
    fusion: FusionMode = FusionMode.EARLY
    profile: str = "desk"
    input_size: tuple = (48, 24)  # (width, height)
    conv: tuple = ((8, 5, 2), (8, 3, 1), (16, 3, 2), (16, 3, 1),
                   (32, 3, 2), (32, 3, 1), (64, 3, 2), (64, 3, 1))
    perception_fc: tuple = (128, 128)
    measurement_fc: tuple = (32, 32)
    joint: int = 128
    branch_fc: tuple = (64, 64)
    speed_fc: tuple = (64, 64)
    fusion_head_fc: tuple = (16, 16)
    speed_norm: float = 90.0
    dropout: float = 0.0

    def __post_init__(self):
        self.fusion = FusionMode.parse(self.fusion)
        self.input_size = tuple(self.input_size)
        self.conv = tuple(tuple(c) for c in self.conv)
        for name in ("perception_fc", "measurement_fc", "branch_fc", "speed_fc", "fusion_head_fc"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.speed_norm <= 0:
            raise ValueError("speed_norm must be positive")

    @classmethod
    def for_profile(cls, fusion="early", profile: str = "desk", **overrides) -> "ModelConfig":
        if profile == "paper":
            base = cls(fusion=fusion, profile="paper", input_size=PROFILES["paper"],
                       conv=((32, 5, 2), (32, 3, 1), (64, 3, 2), (64, 3, 1),
                             (128, 3, 2), (128, 3, 1), (256, 3, 2), (256, 3, 1)),
                       perception_fc=(512, 512), measurement_fc=(128, 128), joint=512,
                       branch_fc=(256, 256), speed_fc=(256, 256), fusion_head_fc=(64, 64))
        elif profile == "desk":
            base = cls(fusion=fusion)
        else:
            raise ValueError(f"unknown profile {profile!r}")
        return replace(base, **overrides) if overrides else base

    def input_specs(self) -> dict:
        w, h = self.input_size
        return {m: ad.TensorSpec((h, w, CHANNELS[m])) for m in modalities(self.fusion)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CILModel:
    """A built network: parameters plus the wiring chosen by ``cfg.fusion``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)
        self.params: dict[str, ad.Parameter] = {}
        self.specs = cfg.input_specs()
        f = cfg.fusion
        if f in (FusionMode.SINGLE_RGB, FusionMode.SINGLE_DEPTH, FusionMode.SINGLE_SS):
            (m,) = modalities(f)
            self.streams = [self._build_stream("s0", [CHANNELS[m]], (m,))]
        elif f is FusionMode.EARLY:
            self.streams = [self._build_stream("s0", [4], ("rgb", "depth"))]
        elif f is FusionMode.MID:
            self.streams = [self._build_stream("s0", [3, 1], ("rgb", "depth"))]
        else:
            self.streams = [self._build_stream("rgb", [3], ("rgb",)),
                            self._build_stream("depth", [1], ("depth",))]
            self.fusion_head = self._mlp("fusion", 6, cfg.fusion_head_fc, 3)

    # ------------------------------------------------------------ building

    def _param(self, name, shape, fan_in):
        p = ad.Parameter(ad.fan_in_uniform(self._rng, shape, fan_in, self.dtype), name)
        self.params[name] = p
        return p

    def _dense(self, name, n_in, n_out):
        return (self._param(f"{name}.w", (n_in, n_out), n_in),
                self._param(f"{name}.b", (n_out,), n_in))

    def _mlp(self, name, n_in, widths, n_out=None):
        layers = []
        for i, wdt in enumerate(widths):
            layers.append(self._dense(f"{name}.fc{i}", n_in, wdt))
            n_in = wdt
        if n_out is not None:
            layers.append(self._dense(f"{name}.out", n_in, n_out))
        return layers

    def _perception(self, name, in_ch):
        cfg = self.cfg
        w, h = cfg.input_size
        convs = []
        for i, (ch, k, s) in enumerate(cfg.conv):
            fan = k * k * in_ch
            convs.append((self._param(f"{name}.conv{i}.w", (k, k, in_ch, ch), fan),
                          self._param(f"{name}.conv{i}.b", (ch,), fan), s, k // 2))
            h = ad.conv_out_size(h, k, s, k // 2)
            w = ad.conv_out_size(w, k, s, k // 2)
            in_ch = ch
        fcs = self._mlp(f"{name}.fc", h * w * in_ch, cfg.perception_fc)
        return {"convs": convs, "fcs": fcs, "flat": h * w * in_ch}

    def _build_stream(self, name, in_channels, mods):
        cfg = self.cfg
        stream = {"name": name, "mods": mods}
        if len(in_channels) == 1:
            stream["P"] = [self._perception(f"{name}.P", in_channels[0])]
        else:
            stream["P"] = [self._perception(f"{name}.P_{m}", c) for m, c in zip(mods, in_channels)]
        p_width = cfg.perception_fc[-1] if cfg.perception_fc else stream["P"][0]["flat"]
        stream["M"] = self._mlp(f"{name}.M", 1, cfg.measurement_fc)
        joint_in = p_width * len(stream["P"]) + cfg.measurement_fc[-1]
        stream["joint_in"] = joint_in
        stream["J"] = self._dense(f"{name}.J", joint_in, cfg.joint)
        stream["branches"] = [self._mlp(f"{name}.A{c}", cfg.joint, cfg.branch_fc, 3)
                              for c in range(4)]
        stream["speed"] = [self._mlp(f"{name}.S{k}", p_width, cfg.speed_fc, 1)
                           for k in range(len(stream["P"]))]
        return stream

    # ------------------------------------------------------------ graph

    def _run_mlp(self, x, layers, name, final_linear, train):
        for i, (w, b) in enumerate(layers):
            x = ad.linear(x, w, b, name=f"{name}.{i}")
            if not (final_linear and i == len(layers) - 1):
                x = ad.relu(x, name=f"{name}.relu{i}")
                if train and self.cfg.dropout > 0:
                    x = ad.dropout(x, self.cfg.dropout, self._rng, name=f"{name}.drop{i}")
        return x

    def _run_perception(self, x, p, name, train):
        for i, (w, b, s, pad) in enumerate(p["convs"]):
            x = ad.relu(ad.conv2d(x, w, b, stride=s, pad=pad, name=f"{name}.conv{i}"))
        x = ad.flatten(x, name=f"{name}.flatten")
        return self._run_mlp(x, p["fcs"], f"{name}.fc", False, train)

    def _inputs(self, perception: dict):
        out = {}
        for m, spec in self.specs.items():
            if m not in perception:
                raise ad.ShapeError(f"input.{m}", "modality missing from observation")
            arr = np.asarray(perception[m], dtype=self.dtype)
            if arr.ndim == 3:
                arr = arr[None]
            spec.check(arr, f"input.{m}")
            out[m] = ad.scale(ad.constant(arr), 1.0 / 255.0, name=f"input.{m}")
        return out

    def graph(self, perception: dict, speed, commands, train: bool = False):
        """Build the forward graph.

        Returns ``(groups, speeds)`` where ``groups`` maps each command present
        in ``commands`` to ``(row indices, action tensor)`` and ``speeds`` is
        the list of speed-head outputs (one per perception stream).
        """
        x = self._inputs(perception)
        n = next(iter(x.values())).shape[0]
        speed = np.asarray(speed, dtype=self.dtype).reshape(-1, 1)
        commands = np.asarray([select_branch(c) for c in np.atleast_1d(commands)])
        if speed.shape[0] != n or commands.shape[0] != n:
            raise ad.ShapeError("input.measurement", f"batch of {n} images but "
                                f"{speed.shape[0]} speeds / {commands.shape[0]} commands")
        m_in = ad.scale(ad.constant(speed), 1.0 / self.cfg.speed_norm, name="input.speed")
        present = [c for c in range(4) if np.any(commands == c)]
        idx = {c: np.nonzero(commands == c)[0] for c in present}

        stream_actions, speeds = [], []
        for st in self.streams:
            name = st["name"]
            if self.cfg.fusion is FusionMode.EARLY:
                feeds = [ad.concat([x["rgb"], x["depth"]], axis=-1, name=f"{name}.early_concat")]
            else:
                feeds = [x[m] for m in st["mods"]]
            feats = [self._run_perception(f, p, f"{name}.P{k}", train)
                     for k, (f, p) in enumerate(zip(feeds, st["P"]))]
            meas = self._run_mlp(m_in, st["M"], f"{name}.M", False, train)
            joint = ad.concat(feats + [meas], axis=-1, name=f"{name}.joint_concat")
            jw, jb = st["J"]
            joint = ad.relu(ad.linear(joint, jw, jb, name=f"{name}.J"))
            acts = {}
            for c in present:
                rows = joint if len(present) == 1 else ad.take_rows(joint, idx[c], name=f"{name}.route{c}")
                acts[c] = self._run_mlp(rows, st["branches"][c], f"{name}.A{c}", True, train)
            stream_actions.append(acts)
            for k, f in enumerate(feats):
                speeds.append(self._run_mlp(f, st["speed"][k], f"{name}.S{k}", True, train))

        if self.cfg.fusion is FusionMode.LATE:
            groups = {}
            for c in present:
                both = ad.concat([stream_actions[0][c], stream_actions[1][c]], axis=-1,
                                 name=f"late.concat{c}")
                groups[c] = (idx[c], self._run_mlp(both, self.fusion_head, "late.head", True, train))
        else:
            groups = {c: (idx[c], stream_actions[0][c]) for c in present}
        return groups, speeds

    # ------------------------------------------------------------ inference

    def forward(self, perception: dict, speed, commands) -> PolicyOutput:
        groups, speeds = self.graph(perception, speed, commands)
        n = len(np.atleast_1d(commands))
        action = np.zeros((n, 3), dtype=self.dtype)
        for rows, t in groups.values():
            action[rows] = t.data
        pred = np.concatenate([s.data for s in speeds], axis=1)
        return PolicyOutput(action, pred)

    def act(self, obs: Observation, command) -> Action:
        out = self.forward(obs.perception, [obs.speed], [command])
        return clamp_action(out.action[0])

    # ------------------------------------------------------------ params

    def parameters(self) -> list:
        return list(self.params.values())

    def branch_parameters(self, c: int) -> list:
        tag = f".A{int(c)}."
        return [p for p in self.params.values() if tag in p.name]

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ad.ShapeError(k, f"checkpoint shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr.astype(self.dtype)

    def astype(self, dtype) -> "CILModel":
        other = CILModel(self.cfg, self.seed, dtype)
        other.load_state_dict(self.state_dict())
        return other

    def init_fusion_head_average(self):
        """Set the late-fusion head to output the mean of the two stream actions."""
        if self.cfg.fusion is not FusionMode.LATE:
            raise ValueError("only late fusion has a fusion head")
        (w0, b0), (w1, b1), (wo, bo) = self.fusion_head
        if w0.data.shape[1] < 12 or w1.data.shape[1] < 12:
            raise ValueError("fusion head needs width >= 12 for the averaging construction")
        for p in (w0, b0, w1, b1, wo, bo):
            p.data[...] = 0
        eye = np.eye(6, dtype=self.dtype)
        # layer 0: [a, -a] so that relu(a) - relu(-a) recovers a
        w0.data[:, :6] = eye
        w0.data[:, 6:12] = -eye
        w1.data[:12, :12] = np.eye(12, dtype=self.dtype)
        for k in range(3):
            for s in (0, 3):
                wo.data[k + s, k] = 0.5
                wo.data[6 + k + s, k] = -0.5

    # ------------------------------------------------------------ checkpoints

    def save(self, directory, extra: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ad.save_snapshot(directory / "params", self.state_dict())
        meta = {"config": self.cfg.to_dict(), "seed": self.seed, "dtype": str(self.dtype)}
        meta.update(extra or {})
        (directory / "manifest").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "CILModel":
        directory = Path(directory)
        meta = json.loads((directory / "manifest").read_text())
        model = cls(ModelConfig.from_dict(meta["config"]), meta.get("seed", 0),
                    np.dtype(meta.get("dtype", "float32")))
        model.load_state_dict(ad.load_snapshot(directory / "params"))
        return model

    def checksum(self) -> str:
        return ad.snapshot_checksum(self.state_dict())


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> CILModel:
    return CILModel(cfg, seed, dtype)


def clamp_action(raw) -> Action:
    s, t, b = (float(v) for v in raw)
    return Action(min(max(s, -1.0), 1.0), min(max(t, 0.0), 1.0), min(max(b, 0.0), 1.0))
