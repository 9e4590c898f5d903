"""Pipeline configuration and its flat ``key = value`` file format.

Keys (defaults in brackets):

    n_queries [16]       detection queries per frame
    n_points [20]        points per decoded polyline
    channels [32]        embedding / feature width
    n_layers [3]         SAQG decoder layers
    decoder_blocks [2]   map-decoder blocks
    ffn_hidden [64]      map-decoder feed-forward width
    history [4]          STFG history frames
    stfg_hidden [128]    STFG MLP hidden width
    tau_d [0.4]          detection birth threshold
    tau_t [0.5]          track survival threshold
    tau_l [0.5]          mask-attention threshold
    beta [0.9]           memory decay factor
    theta [0.5]          memory validity threshold
    k_max [256]          max sampled cells per track for guidance
    window [-16,16,-16,16], resolution [0.5], thickness [1.0]
    w_cls [2.0], w_pts [5.0], w_score [1.0], lambda_dice [2.0], lambda_bce [1.0]
    lr [0.002], momentum [0.9], clip_norm [5.0], epochs [100], seed [0]
    use_hmg [true], use_stfg [true]
    teacher_histories [true]  training scores L_pred on ground-truth histories; fusion always uses decoded ones

Lines starting with ``#`` and blank lines are ignored.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .geometry import Window, grid_shape

CONFIG_HEADER = "# vecmap-config v1"


@dataclass
class PipelineConfig:
    n_queries: int = 16
    n_points: int = 20
    channels: int = 32
    n_layers: int = 3
    decoder_blocks: int = 2
    ffn_hidden: int = 64
    history: int = 4
    stfg_hidden: int = 128
    tau_d: float = 0.4
    tau_t: float = 0.5
    tau_l: float = 0.5
    beta: float = 0.9
    theta: float = 0.5
    k_max: int = 256
    window: tuple = (-16.0, 16.0, -16.0, 16.0)
    resolution: float = 0.5
    thickness: float = 1.0
    w_cls: float = 2.0
    w_pts: float = 5.0
    w_score: float = 1.0
    lambda_dice: float = 2.0
    lambda_bce: float = 1.0
    lr: float = 0.002
    momentum: float = 0.9
    clip_norm: float = 5.0
    epochs: int = 100
    seed: int = 0
    use_hmg: bool = True
    use_stfg: bool = True
    teacher_histories: bool = True

    def __post_init__(self):
        self.window = Window(*(float(v) for v in self.window))
        self.validate()

    @property
    def half_extent(self) -> float:
        return self.window.half_extent

    def validate(self) -> None:
        for name in ("tau_d", "tau_t", "tau_l", "theta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.n_queries < 1 or self.n_points < 2 or self.n_layers < 1 or self.history < 1:
            raise ConfigError("need n_queries >= 1, n_points >= 2, n_layers >= 1, history >= 1")
        if self.channels < 4:
            raise ConfigError("channels must be >= 4")
        grid_shape(self.window, self.resolution)

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = [CONFIG_HEADER]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ",".join(repr(float(x)) for x in v)
            else:
                s = repr(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(key, val, types[key], lineno)
        return cls(**values)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _parse(key: str, val: str, typ: str, lineno: int):
    try:
        if typ == "bool":
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return val.lower() in ("true", "1", "yes")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        if typ == "tuple":
            return tuple(float(x) for x in val.strip("()[] ").split(","))
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    raise ConfigError(f"line {lineno}: unsupported type for {key}")
