"""Run configuration: an ini-style file mirroring every tunable dataclass.

One file drives a whole run.  Sections map onto the package's config
dataclasses; unknown sections or keys are rejected loudly so a typo can
never silently fall back to a default.  The effective configuration
(defaults included) is echoed into each run's output directory, which
makes any run reproducible from its own artifacts.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .fce import ConsistencyFn
from .features import FeatureNetConfig
from .grid import DEFAULT_MARGIN, NoiseRanges
from .head import HeadConfig
from .training import TrainConfig

__all__ = ["RunConfig", "parse_run_config", "load_run_config", "echo_config"]


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs: model, grid, training, and I/O settings."""

    features: FeatureNetConfig = field(default_factory=FeatureNetConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    fn: ConsistencyFn = field(default_factory=ConsistencyFn)
    resl: int = 10
    margin: float = DEFAULT_MARGIN
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str = ""
    checkpoint: str = ""
    out_dir: str = ""
    iterations: int = 1          # inference-time refinement passes
    seed: int = 0
    threads: int = 0             # 0 = decide from the machine

    def __post_init__(self):
        if self.resl < 2:
            raise ConfigError(f"grid resl must be ≥ 2, got {self.resl}")
        if self.margin < 1.0:
            raise ConfigError(f"grid margin must be ≥ 1, got {self.margin}")
        if self.iterations < 0:
            raise ConfigError(
                f"iterations must be ≥ 0, got {self.iterations}")


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _convert(raw: str, like, context: str):
    """Parse ``raw`` into the type of the default value ``like``."""
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"{context}: expected a boolean, got {raw!r}")
    if isinstance(like, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{context}: expected an integer, got {raw!r}") from exc
    if isinstance(like, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{context}: expected a number, got {raw!r}") from exc
    if isinstance(like, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        try:
            return tuple(float(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"{context}: expected numbers, got {raw!r}") from exc
    return raw


def _apply_section(parser: configparser.ConfigParser, section: str,
                   defaults) -> dict:
    """Collect overrides for a dataclass from one ini section."""
    allowed = {f.name: getattr(defaults, f.name) for f in fields(defaults)}
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in allowed:
            raise ConfigError(
                f"unknown key {key!r} in section [{section}]; "
                f"allowed: {', '.join(sorted(allowed))}")
        out[key] = _convert(raw, allowed[key], f"[{section}] {key}")
    return out


_RUN_KEYS = {
    "resl": 10, "margin": DEFAULT_MARGIN, "data_dir": "", "checkpoint": "",
    "out_dir": "", "iterations": 1, "seed": 0, "threads": 0,
    "consistency": "rbf",
}

_NOISE_KEYS = ("x", "y", "z", "w", "h", "l", "theta")


def parse_run_config(text: str) -> RunConfig:
    """Parse ini-format ``text``; unknown sections or keys raise."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    known_sections = {"features", "head", "train", "noise", "run"}
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(
                f"unknown section [{section}]; "
                f"allowed: {', '.join(sorted(known_sections))}")

    feat = FeatureNetConfig(**_apply_section(parser, "features",
                                             FeatureNetConfig()))
    head = HeadConfig(**_apply_section(parser, "head", HeadConfig()))

    noise_over = {}
    if parser.has_section("noise"):
        for key, raw in parser.items("noise"):
            if key not in _NOISE_KEYS:
                raise ConfigError(
                    f"unknown key {key!r} in section [noise]; "
                    f"allowed: {', '.join(_NOISE_KEYS)}")
            noise_over[key] = _convert(raw, 1.0, f"[noise] {key}")
    noise = NoiseRanges(**noise_over)

    train_over = _apply_section(parser, "train", TrainConfig())
    train = TrainConfig(noise=noise, **train_over)

    run_over = {}
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(
                    f"unknown key {key!r} in section [run]; "
                    f"allowed: {', '.join(sorted(_RUN_KEYS))}")
            run_over[key] = _convert(raw, _RUN_KEYS[key], f"[run] {key}")

    fn = ConsistencyFn(kind=run_over.pop("consistency", "rbf"))
    return RunConfig(features=feat, head=head, fn=fn, train=train, **run_over)


def load_run_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_run_config(p.read_text())


def echo_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Write the complete effective configuration into ``out_dir``."""
    parser = configparser.ConfigParser()
    parser["features"] = {f.name: _fmt(getattr(cfg.features, f.name))
                          for f in fields(cfg.features)}
    parser["head"] = {f.name: _fmt(getattr(cfg.head, f.name))
                      for f in fields(cfg.head)}
    parser["noise"] = {k: _fmt(getattr(cfg.train.noise, k))
                       for k in _NOISE_KEYS}
    parser["train"] = {f.name: _fmt(getattr(cfg.train, f.name))
                       for f in fields(cfg.train) if f.name != "noise"}
    parser["run"] = {
        "consistency": cfg.fn.kind,
        "resl": _fmt(cfg.resl), "margin": _fmt(cfg.margin),
        "data_dir": cfg.data_dir, "checkpoint": cfg.checkpoint,
        "out_dir": cfg.out_dir, "iterations": _fmt(cfg.iterations),
        "seed": _fmt(cfg.seed), "threads": _fmt(cfg.threads),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.ini"
    with path.open("w") as fh:
        parser.write(fh)
    return path


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(f"{v:g}" for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)
