"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import difflib
from dataclasses import asdict, dataclass, fields

from .guidance import GuidanceConfig

REFERENCE_KINDS = ("translating", "static", "multi_object")
FLOW_MODES = ("hard", "soft")


class ConfigError(ValueError):
    """Bad key or value; ``key`` names the offender."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_pair(kind):
    def parse(text):
        parts = [p for p in text.replace(",", " ").split() if p]
        if len(parts) != 2:
            raise ValueError(f"expected two values, got {text!r}")
        return tuple(kind(p) for p in parts)

    return parse


def _parse_objects(text):
    """``y0 x0 hh ww vy vx; ...`` -> list of ((y0, x0, hh, ww), (vy, vx))."""
    objects = []
    for chunk in text.split(";"):
        nums = [int(v) for v in chunk.replace(",", " ").split()]
        if not nums:
            continue
        if len(nums) != 6:
            raise ValueError(f"object needs 6 integers (y0 x0 height width vy vx), got {chunk.strip()!r}")
        objects.append((tuple(nums[:4]), tuple(nums[4:])))
    return objects


def _format_objects(objects):
    return "; ".join(" ".join(str(v) for v in (*region, *vel)) for region, vel in objects)


@dataclass
class RunConfig:
    # grid and synthetic inputs
    frames: int = 9
    channels: int = 8
    height: int = 32
    width: int = 32
    reference: str = "translating"
    velocity: tuple = (0.0, 1.0)
    objects: list = None
    amplitude: float = 2.0
    content_band: float = 0.35
    # seeds: one master seed, split into named streams
    seed: int = 0
    # sampler
    outer_steps: int = 50
    guided_fraction: float = 0.2
    # guidance (mirrors GuidanceConfig)
    inner_steps: int = 10
    skip_interval: int = 3
    lr_start: float = 0.003
    lr_end: float = 0.002
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    force_full_gradients: bool = False
    moments_on_reuse: bool = True
    lambda_amf: float = 5.0
    lambda_window: float = 1.0
    alpha: float = 0.2
    s_f: int = 3
    l: int = 9
    tau: float = 4.0
    head_dim: int = 8
    tile_size: tuple = (4, 4)
    tile_stride: tuple = (4, 4)
    center_mode: str = "anchor"
    qk_norm: bool = True
    # diagnostics
    flow_mode: str = "hard"
    gradcheck_step: float = 1e-3
    out_dir: str = "out"

    def __post_init__(self):
        if self.objects is None:
            self.objects = [((2, 2, 8, 8), (0, 1)), ((16, 16, 8, 8), (1, 0)), ((20, 2, 8, 8), (0, -1))]

    def guidance(self):
        names = {f.name for f in fields(GuidanceConfig)}
        return GuidanceConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def validate(self):
        checks = [
            ("frames", self.frames >= 2, "needs at least 2 frames"),
            ("channels", self.channels >= 1, "must be >= 1"),
            ("height", self.height >= 1, "must be >= 1"),
            ("width", self.width >= 1, "must be >= 1"),
            ("reference", self.reference in REFERENCE_KINDS, f"must be one of {REFERENCE_KINDS}"),
            ("flow_mode", self.flow_mode in FLOW_MODES, f"must be one of {FLOW_MODES}"),
            ("center_mode", self.center_mode in ("argmax", "expectation", "anchor"), "must be argmax, expectation or anchor"),
            ("amplitude", self.amplitude > 0, "must be positive"),
            ("content_band", self.content_band > 0, "must be positive"),
            ("outer_steps", self.outer_steps >= 1, "must be >= 1"),
            ("guided_fraction", 0 < self.guided_fraction <= 1, "must be in (0, 1]"),
            ("head_dim", self.head_dim >= 2, "must be >= 2"),
            ("l", self.l <= min(self.height, self.width), f"window side exceeds the {self.height}x{self.width} grid"),
            ("tile_size", min(self.tile_size) >= 1 and self.tile_size[0] <= self.height and self.tile_size[1] <= self.width, "must fit the grid"),
            ("tile_stride", min(self.tile_stride) >= 1, "must be >= 1"),
            ("gradcheck_step", self.gradcheck_step > 0, "must be positive"),
            ("seed", 0 <= self.seed < 2**64, "must fit in 64 bits"),
        ]
        for key, ok, why in checks:
            if not ok:
                raise ConfigError(f"{key}: {why} (got {getattr(self, key)!r})", key)
        try:
            self.guidance()
        except ValueError as exc:
            raise ConfigError(f"invalid guidance setting: {exc}", _guess_key(str(exc))) from exc
        return self

    def as_dict(self):
        out = {}
        for k, v in asdict(self).items():
            if k == "objects":
                out[k] = [[list(r), list(vv)] for r, vv in v]
            else:
                out[k] = list(v) if isinstance(v, tuple) else v
        return out

    def to_text(self):
        """Round-trippable ``key = value`` lines."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "objects":
                text = _format_objects(v)
            elif isinstance(v, tuple):
                text = " ".join(repr(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


def _guess_key(message):
    for f in fields(RunConfig):
        if message.startswith(f.name) or f" {f.name} " in f" {message} ":
            return f.name
    return None


_PARSERS = {
    int: int,
    float: float,
    str: str,
    bool: _parse_bool,
}


def _parser_for(name):
    default = RunConfig()
    value = getattr(default, name)
    if name == "objects":
        return _parse_objects
    if name == "velocity":
        return _parse_pair(float)
    if isinstance(value, tuple):
        return _parse_pair(type(value[0]))
    return _PARSERS[type(value)]


KEYS = tuple(f.name for f in fields(RunConfig))


def _unknown(key):
    close = difflib.get_close_matches(key, KEYS, n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigError(f"unknown config key {key!r}{hint}", key)


def parse_lines(text, source="<config>"):
    """``{key: raw string}`` from ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise _unknown(key)
        if key in values:
            raise ConfigError(f"{source}:{n}: key {key!r} given twice", key)
        values[key] = value
    return values


def parse_config(path=None, flag_overrides=None):
    """Defaults, then the file at ``path`` (if any), then ``flag_overrides`` (``{key: str}``)."""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            raw = parse_lines(fh.read(), str(path))
    for key, value in (flag_overrides or {}).items():
        if key not in KEYS:
            raise _unknown(key)
        raw[key] = value
    kwargs = {}
    for key, text in raw.items():
        try:
            kwargs[key] = _parser_for(key)(text) if isinstance(text, str) else text
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key!r}: {exc}", key) from exc
    return RunConfig(**kwargs).validate()


def parse_overrides(items):
    """``["k=v", ...]`` from the command line -> ``{k: v}``; a key given twice conflicts."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key in out:
            raise ConfigError(f"conflicting overrides for {key!r}", key)
        out[key] = value
    return out
