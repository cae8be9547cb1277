"""Plain-text run configuration.

One ``key = value`` pair per line; ``#`` starts a comment; blank lines are
ignored.  Vectors are whitespace-separated numbers, booleans are
``true``/``false``.  Every key has a default (listed in ``Config``); unknown
or repeated keys are errors.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Bad configuration; the message names the offending key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class Config:
    # data
    preset: str = "sphere"
    dataset: str = ""  # posed-image directory; overrides the preset when set
    normalize: bool = True  # rescale a loaded dataset by its camera bounding box
    width: int = 128
    height: int = 128
    background: tuple = (0.0, 0.0, 0.0)
    light: tuple = (0.4, -0.3, 0.85)
    # initial grid
    bounds: tuple = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)
    init_points: int = 2000
    init_radius: float = 0.0  # 0 -> 0.3 x bounds diagonal
    init_sharpness: float = 0.0  # 0 -> band of 0.25 x bounds diagonal
    sh_degree: int = 0
    # schedule
    iterations: int = 18000
    densify_every: int = 500
    densify_start: int = 2000
    densify_end: int = 16000
    prune_every: int = 500
    prune_start: int = 4000
    prune_end: int = 15000
    cull_every: int = 100
    checkpoint_every: int = 1000
    # loss weights
    lambda_mesh: float = 1.0
    lambda_field: float = 1.0
    lambda_mesh_depth: float = 0.05
    lambda_mesh_normal: float = 0.05
    lambda_normal_depth: float = 0.05
    lambda_eikonal: float = 0.01
    lambda_curvature: float = 5e-6
    lambda_ssim: float = 0.2
    # optimiser
    lr_sdf: float = 1e-3
    lr_appearance: float = 2.5e-3
    lr_log_s: float = 1e-3
    max_log_s: float = 12.0
    # adaptation
    densify_surface: bool = True
    densify_error: bool = True
    densify_fraction: float = 0.05
    prune: bool = True
    tau_c: float = 0.01
    cull: bool = True
    # run
    seed: int = 1
    workers: int = 0  # 0 -> numba default
    output: str = "out"

    source: str = field(default="", repr=False, compare=False)  # verbatim text

    def validate(self) -> "Config":
        def bad(key, why):
            raise ConfigError(f"{key}: {why}", key)

        if not self.dataset:
            from .scenes import PRESETS

            if self.preset not in PRESETS:
                bad("preset", f"unknown preset {self.preset!r} (choose from {', '.join(PRESETS)})")
        for key in ("width", "height", "init_points"):
            if getattr(self, key) < 1:
                bad(key, "must be positive")
        if self.init_points < 8:
            bad("init_points", "must be at least 8")
        for key in ("iterations",):
            if getattr(self, key) < 0:
                bad(key, "must be non-negative")
        for key in ("densify_every", "prune_every", "cull_every", "checkpoint_every"):
            if getattr(self, key) < 1:
                bad(key, "must be positive")
        for key in ("densify_start", "densify_end", "prune_start", "prune_end"):
            if getattr(self, key) < 0:
                bad(key, "must be non-negative")
        if self.densify_end < self.densify_start:
            bad("densify_end", "must not precede densify_start")
        if self.prune_end < self.prune_start:
            bad("prune_end", "must not precede prune_start")
        if self.iterations > 0:
            for key in ("densify_end", "prune_end"):
                if getattr(self, key) > self.iterations:
                    bad(key, f"{getattr(self, key)} exceeds iterations = {self.iterations}")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                bad(f.name, "must be finite")
            if f.name.startswith(("lambda_", "lr_")) and v < 0:
                bad(f.name, "must be non-negative")
        if len(self.background) != 3 or any(not 0 <= c <= 1 for c in self.background):
            bad("background", "needs three values in [0, 1]")
        if len(self.light) != 3 or not any(self.light):
            bad("light", "needs three values, not all zero")
        if len(self.bounds) != 6 or any(self.bounds[i] >= self.bounds[i + 3] for i in range(3)):
            bad("bounds", "needs xmin ymin zmin xmax ymax zmax with min < max")
        if self.init_radius < 0 or self.init_sharpness < 0:
            bad("init_radius" if self.init_radius < 0 else "init_sharpness", "must be >= 0")
        if self.sh_degree not in (0, 1, 2):
            bad("sh_degree", "must be 0, 1 or 2")
        if not 0 < self.densify_fraction <= 1:
            bad("densify_fraction", "must lie in (0, 1]")
        if self.tau_c < 0:
            bad("tau_c", "must be non-negative")
        if self.workers < 0:
            bad("workers", "must be non-negative")
        if not self.output:
            bad("output", "must not be empty")
        return self

    def resolved_text(self) -> str:
        """Every key with its effective value, in declaration order."""
        return "".join(f"{k} = {_format(getattr(self, k))}\n" for k in keys())


def keys() -> list[str]:
    return [f.name for f in dataclasses.fields(Config) if f.name != "source"]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    return str(v)


def _convert(key: str, default, text: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected true/false, got {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            vals = tuple(float(x) for x in text.replace(",", " ").split())
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} numbers, got {len(vals)}")
            return vals
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}", key) from None


def parse_config(text: str, source: str = "<config>", overrides=()) -> Config:
    """Parse config text; ``overrides`` are extra ``key=value`` strings applied last."""
    defaults = Config()
    known = set(keys())
    values = {}
    lines = [(f"{source}:{no}", raw) for no, raw in enumerate(text.splitlines(), 1)]
    lines += [("override", o) for o in overrides]
    for where, raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}", key)
        if key in values and where != "override":
            raise ConfigError(f"{where}: duplicate key {key!r}", key)
        values[key] = _convert(key, getattr(defaults, key), value)
    cfg = dataclasses.replace(defaults, **values)
    cfg.source = text
    return cfg.validate()


def load_config(path, overrides=()) -> Config:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p), overrides)


def echo_config(cfg: Config, directory) -> None:
    """Copy the source text verbatim plus the fully resolved key list."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.txt").write_text(cfg.source)
    (d / "config.resolved.txt").write_text(cfg.resolved_text())
