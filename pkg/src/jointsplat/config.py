"""Run configuration as flat dotted ``key = value`` text (a TOML subset).

Every key has a default and a one-line description; unknown keys are
rejected, and ``parse(dumps(cfg)) == cfg`` for every accepted config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .dynamics import HashGridConfig, TemporalNetConfig
from .harness import NoiseSpec
from .losses import LossWeights
from .optim import GROUPS, StageSchedule
from .scene import SceneConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


DOCS = {
    "scene.width": "image width in pixels",
    "scene.height": "image height in pixels",
    "scene.focal": "focal length in pixels",
    "scene.frames": "number of frames in the sequence",
    "scene.joints": "24 builds the humanoid, anything else a straight chain",
    "scene.human_count": "human Gaussians",
    "scene.background_count": "background Gaussians",
    "scene.motion_amplitude": "joint swing amplitude, radians",
    "scene.nonrigid_amplitude": "ground-truth non-rigid ripple amplitude, scene units",
    "scene.color_flicker": "ground-truth colour flicker amplitude",
    "scene.camera_distance": "orbit radius; also the scene radius",
    "scene.camera_arc": "azimuth covered by the camera orbit, radians",
    "scene.texture_period": "procedural texture period, scene units",
    "scene.sh_degree": "spherical harmonics degree",
    "scene.seed": "scene generation seed",
    "schedule.warmup": "iterations of Gaussian-only warm-up",
    "schedule.independent": "iterations with per-source camera/pose refinement",
    "schedule.joint": "iterations of joint refinement (cosine decay)",
    "schedule.final_ratio": "learning rate at the end, as a fraction of the base rate",
    "noise.sigma": "initialisation noise on cameras and joint angles",
    "noise.perturb_beta": "also perturb bone-length scales",
    "train.seed": "training seed (frame order)",
    "train.disable_dynamics": "turn off the temporal residual network",
    "train.disable_synergistic": "keep cameras and body parameters frozen",
    "train.eval_every": "validation PSNR interval, 0 = never",
    "train.snapshot_every": "rollback snapshot interval",
    "net.position_encoding": "hash or frequency",
    "net.position_octaves": "frequency encoding octaves for positions",
    "net.time_octaves": "frequency encoding octaves for time",
    "net.hidden": "hidden width of both decoders",
    "net.seed": "network initialisation seed",
    "net.hash_levels": "hash grid levels",
    "net.hash_table_size": "entries per hash table",
    "net.hash_features": "features per entry",
    "net.hash_base_resolution": "coarsest grid resolution",
    "net.hash_growth": "per-level resolution growth",
    "net.hash_bbox_min": "lower corner of the encoded box (canonical space)",
    "net.hash_bbox_max": "upper corner of the encoded box (canonical space)",
    "output.dir": "where train/generate/sweep write their files",
}
for _g in GROUPS:
    DOCS[f"lr.{_g}"] = f"base learning rate of the {_g} group"
for _f in fields(LossWeights):
    DOCS[f"loss.{_f.name}"] = f"weight of the {_f.name} term"

_SCHEDULE_KEYS = ("warmup", "independent", "joint", "final_ratio")
_TRAIN_KEYS = ("seed", "disable_dynamics", "disable_synergistic", "eval_every", "snapshot_every")
_NET_KEYS = ("position_encoding", "position_octaves", "time_octaves", "hidden", "seed")
_HASH_KEYS = ("levels", "table_size", "features", "base_resolution", "growth", "bbox_min", "bbox_max")


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    output_dir: str = "out"

    def to_flat(self) -> dict:
        out = {}
        for f in fields(SceneConfig):
            out[f"scene.{f.name}"] = getattr(self.scene, f.name)
        s = self.train.schedule
        for k in _SCHEDULE_KEYS:
            out[f"schedule.{k}"] = getattr(s, k)
        for g in GROUPS:
            out[f"lr.{g}"] = s.lr[g]
        for f in fields(LossWeights):
            out[f"loss.{f.name}"] = getattr(self.train.weights, f.name)
        out["noise.sigma"] = self.noise.sigma
        out["noise.perturb_beta"] = self.noise.perturb_beta
        for k in _TRAIN_KEYS:
            out[f"train.{k}"] = getattr(self.train, k)
        net = self.train.net
        for k in _NET_KEYS:
            out[f"net.{k}"] = getattr(net, k)
        for k in _HASH_KEYS:
            v = getattr(net.hash_grid, k)
            out[f"net.hash_{k}"] = list(v) if isinstance(v, tuple) else v
        out["output.dir"] = self.output_dir
        return out

    @classmethod
    def from_flat(cls, values: dict) -> RunConfig:
        unknown = sorted(set(values) - set(DOCS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        flat = cls().to_flat()
        for k, v in values.items():
            flat[k] = _coerce(k, v, flat[k])
        sect = lambda p: {k[len(p) + 1:]: v for k, v in flat.items() if k.startswith(p + ".")}
        try:
            hg = sect("net")
            hash_grid = HashGridConfig(**{k: tuple(hg[f"hash_{k}"]) if k.startswith("bbox") else hg[f"hash_{k}"]
                                          for k in _HASH_KEYS})
            net = TemporalNetConfig(hash_grid=hash_grid, **{k: hg[k] for k in _NET_KEYS})
            sch = sect("schedule")
            schedule = StageSchedule(lr=sect("lr"), **sch)
            train = TrainConfig(schedule=schedule, weights=LossWeights(**sect("loss")), net=net, **sect("train"))
            noise = NoiseSpec(sigma=flat["noise.sigma"], perturb_beta=flat["noise.perturb_beta"])
            return cls(SceneConfig(**sect("scene")), train, noise, flat["output.dir"])
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def with_values(self, **dotted) -> RunConfig:
        """Override keys given with ``__`` for dots, e.g. ``scene__width=32``."""
        flat = self.to_flat()
        flat.update({k.replace("__", "."): v for k, v in dotted.items()})
        return RunConfig.from_flat(flat)


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key} must be a list of {len(default)} numbers, got {value!r}")
        return [_coerce(key, x, 0.0) for x in value]
    raise ConfigError(f"cannot coerce {key}")


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


_ESCAPES = {'"': '\\"', "\\": "\\\\", "\b": "\\b", "\t": "\\t", "\n": "\\n", "\f": "\\f", "\r": "\\r"}


def _toml_string(s: str) -> str:
    out = []
    for ch in s:
        if ch in _ESCAPES:
            out.append(_ESCAPES[ch])
        elif ord(ch) < 0x20 or ord(ch) == 0x7F:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    return '"' + "".join(out) + '"'


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return _toml_string(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_format(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {v!r}")


def dumps(config: RunConfig, comments: bool = True) -> str:
    lines = []
    section = None
    for k, v in config.to_flat().items():
        head = k.split(".")[0]
        if head != section:
            if section is not None:
                lines.append("")
            section = head
        if comments:
            lines.append(f"# {DOCS[k]}")
        lines.append(f"{k} = {_format(v)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> RunConfig:
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"malformed config: {err}") from err
    return RunConfig.from_flat(_flatten(tree))


def parse_override(item: str) -> dict:
    """``"scene.width=32"`` -> ``{"scene.width": 32}`` (value in TOML syntax)."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"expected key=value, got {item!r}")
    try:
        return _flatten(tomllib.loads(f"{key.strip()} = {raw.strip()}"))
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"bad override {item!r}: {err}") from err


def load(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())


def bench_config(**overrides) -> RunConfig:
    """The small scene and short schedule used by the experiment suite."""
    from .harness import BENCH_LR, BENCH_SCENE, BENCH_SCHEDULE

    base = RunConfig(scene=SceneConfig(**BENCH_SCENE),
                     train=TrainConfig(schedule=StageSchedule(lr=dict(BENCH_LR), **BENCH_SCHEDULE), eval_every=0))
    return base.with_values(**overrides) if overrides else base


def replace_scene(config: RunConfig, **kw) -> RunConfig:
    return replace(config, scene=replace(config.scene, **kw))
