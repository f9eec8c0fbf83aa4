"""Plain-text ``key = value`` run configuration shared by every CLI command.

Lines starting with ``#`` and trailing ``# ...`` comments are ignored. Every
command-line flag has a key of the same name (dashes become underscores);
values given on the command line override the file.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Iterable, Mapping, Optional

from prdepth.network import ToyPRNetConfig


class ConfigError(ValueError):
    """Unknown key, unparsable value or malformed line."""


@dataclass
class RunConfig:
    # depth planes
    strategy: str = "UR"
    D: int = 8
    plane_d_min: float = 0.0
    plane_d_max: float = 10.0
    # refinement and losses
    filter_radius: int = 4
    filter_eps: float = 1e-4
    lam: float = 0.7
    use_filter: bool = True
    use_confidence: bool = True
    # network and training
    base_channels: int = 16
    encoder_depth: int = 3
    steps: int = 500
    lr: float = 0.01
    momentum: float = 0.0
    seed: int = 0
    # synthetic data
    n_scenes: int = 1
    height: int = 64
    width: int = 64
    samples: int = 500
    n_rects: int = 4
    depth_min: float = 1.0
    depth_max: float = 5.0
    slant: bool = True
    # files
    out: Optional[str] = None
    data: Optional[str] = None
    checkpoint: Optional[str] = None
    log: Optional[str] = None
    scene: Optional[str] = None
    depth: Optional[str] = None
    sparse: Optional[str] = None
    plane: Optional[str] = None
    residual: Optional[str] = None
    planes: Optional[str] = None
    logits: Optional[str] = None
    guide: Optional[str] = None
    gt_dir: Optional[str] = None
    pred_dir: Optional[str] = None
    report: Optional[str] = None
    inverse_unit: str = "1/m"

    def network_config(self) -> ToyPRNetConfig:
        return ToyPRNetConfig(
            D=self.D,
            base_channels=self.base_channels,
            encoder_depth=self.encoder_depth,
            filter_radius=self.filter_radius,
            filter_eps=self.filter_eps,
            lam=self.lam,
            use_filter=self.use_filter,
            use_confidence=self.use_confidence,
            seed=self.seed,
            strategy=self.strategy,
            plane_d_min=self.plane_d_min,
            plane_d_max=self.plane_d_max,
            momentum=self.momentum,
        )

    def to_text(self, only: Optional[Iterable[str]] = None) -> str:
        """One ``key = value`` line per set field, restricted to ``only`` if given."""
        wanted = None if only is None else set(only)
        lines = []
        for key, value in asdict(self).items():
            if value is None or (wanted is not None and key not in wanted):
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def keys() -> list[str]:
    return list(_TYPES)


def key_type(key: str) -> str:
    """Declared type name of ``key``: ``int``, ``float``, ``bool`` or a string type."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    return _TYPES[key]


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def convert(key: str, raw: Any) -> Any:
    """Coerce ``raw`` to the declared type of ``key``."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    kind = _TYPES[key]
    try:
        if kind == "bool":
            return parse_bool(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return raw.strip()


def parse_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = convert(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def read_file(path: str | os.PathLike) -> Dict[str, Any]:
    with open(path) as f:
        return parse_text(f.read(), os.fspath(path))


def build(file_values: Mapping[str, Any] = (), flag_values: Mapping[str, Any] = ()) -> RunConfig:
    """Defaults, then file values, then flags."""
    merged: Dict[str, Any] = {}
    for source in (file_values, flag_values):
        for key, value in dict(source).items():
            merged[key] = convert(key, value)
    return RunConfig(**merged)
