"""Pipeline configuration and its flat ``key=value`` file form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..ns_block import ConfigError, NsConfig

STRATEGIES = ("G->L", "L->L", "L->G", "G->G", "none")


def _global_ns() -> NsConfig:
    return NsConfig(channels=32, groups=4, kernel=3, dilations=(3, 4, 3, 4))


def _local_ns() -> NsConfig:
    return NsConfig(channels=32, groups=4, kernel=3, dilations=(1, 2, 1, 2))


@dataclass
class PipelineConfig:
    height: int = 64
    width: int = 112
    window: int = 5
    low_channels: int = 24
    high_channels: int = 32
    encoder_widths: tuple[int, ...] = (16, 24, 32, 32)
    decoder_channels: int = 16
    global_ns: NsConfig = field(default_factory=_global_ns)
    local_ns: NsConfig = field(default_factory=_local_ns)
    strategy: str = "G->L"
    lr: float = 3e-4
    weight_decay: float = 1e-4
    steps: int = 500
    batch_clips: int = 1
    seed: int = 0

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        # /4 keeps the low level exact; the high level rounds up when /8 is not
        if self.height % 4 or self.width % 4:
            raise ConfigError(f"input {self.height}x{self.width} must be divisible by 4")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if len(self.encoder_widths) != 4:
            raise ConfigError("encoder_widths needs 4 stage widths")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("global_ns", "local_ns"):
            ns = getattr(self, name)
            if ns.channels != self.high_channels:
                raise ConfigError(f"{name}.channels={ns.channels} != high_channels={self.high_channels}")
        if self.batch_clips < 1 or self.steps < 0:
            raise ConfigError("batch_clips must be >= 1 and steps >= 0")

    @property
    def low_size(self) -> tuple[int, int]:
        return self.height // 4, self.width // 4

    @property
    def high_size(self) -> tuple[int, int]:
        return -(-self.height // 8), -(-self.width // 8)

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)


def micro_config(**overrides) -> PipelineConfig:
    """Tiny network for finite-difference checks (16x28 input, 2-frame window)."""
    base = dict(
        height=16,
        width=28,
        window=2,
        low_channels=4,
        high_channels=4,
        encoder_widths=(2, 3, 4, 4),
        decoder_channels=3,
        global_ns=NsConfig(channels=4, groups=2, kernel=1, dilations=(1, 2)),
        local_ns=NsConfig(channels=4, groups=2, kernel=1, dilations=(1, 1)),
    )
    base.update(overrides)
    return PipelineConfig(**base)


# ------------------------------------------------------------ key=value form

_NS_FIELDS = {f.name: f.type for f in dataclasses.fields(NsConfig) if f.name != "channels"}
_TOP_FIELDS = [f.name for f in dataclasses.fields(PipelineConfig) if f.name not in ("global_ns", "local_ns")]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def config_to_text(cfg: PipelineConfig) -> str:
    lines = [f"{name}={_fmt(getattr(cfg, name))}" for name in _TOP_FIELDS]
    for block in ("global_ns", "local_ns"):
        ns = getattr(cfg, block)
        lines += [f"{block}.{name}={_fmt(getattr(ns, name))}" for name in _NS_FIELDS]
    return "\n".join(lines) + "\n"


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(name: str, template, text: str):
    if isinstance(template, bool):
        return _parse_bool(text)
    if isinstance(template, tuple):
        return tuple(int(v) for v in text.split(",") if v.strip())
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text.strip()


def config_from_text(text: str) -> PipelineConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment; unknown keys raise."""
    default = PipelineConfig()
    top: dict = {}
    ns: dict[str, dict] = {"global_ns": {}, "local_ns": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if "." in key:
                block, sub = key.split(".", 1)
                if block not in ns or sub not in _NS_FIELDS:
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
                ns[block][sub] = _coerce(sub, getattr(getattr(default, block), sub), value)
            else:
                if key not in _TOP_FIELDS:
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
                top[key] = _coerce(key, getattr(default, key), value)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from exc
    channels = top.get("high_channels", default.high_channels)
    for block in ns:
        base = dataclasses.asdict(getattr(default, block))
        base.update(ns[block])
        base["channels"] = channels
        top[block] = NsConfig(**base)
    return PipelineConfig(**top)


def load_config(path) -> PipelineConfig:
    return config_from_text(Path(path).read_text())


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(config_to_text(cfg))
