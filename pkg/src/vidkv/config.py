"""QuantConfig: every tunable of the quantized cache, with strict JSON loading."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

METRICS = ("range", "variance", "outlier_count")
FFT_MODES = ("auto", "on", "off")
VALUE_MODES = ("uniform2", "ternary", "ternary_stp", "uniform2_per_token", "uniform1")
KEY_REQUANT = ("faithful_full", "frozen_incremental")
FFT_AUTO_K = (0.5, 0.75)


@dataclass(frozen=True)
class QuantConfig:
    """Defaults: G=32, R=128, gamma=0.7, M=3.

    ``identity`` disables all quantization (blocks hold raw float32 rows) and
    ``experimental`` unlocks the 1-bit value path kept only for failure studies.
    """

    key_k: float = 0.5
    key_metric: str = "range"
    key_M: float = 3.0
    fft_mode: str = "auto"
    value_mode: str = "ternary"
    gamma: float = 0.7
    p: float = 0.0
    G: int = 32
    R: int = 128
    key_requant: str = "faithful_full"
    identity: bool = False
    experimental: bool = False

    def __post_init__(self) -> None:
        checks = [
            ("key_k", 0.0 <= self.key_k <= 1.0, "must lie in [0, 1]"),
            ("p", 0.0 <= self.p <= 1.0, "must lie in [0, 1]"),
            ("G", self.G >= 1, "must be >= 1"),
            ("R", self.R >= self.G, "must be >= G"),
            ("gamma", self.gamma > 0, "must be > 0"),
            ("key_metric", self.key_metric in METRICS, f"must be one of {METRICS}"),
            ("fft_mode", self.fft_mode in FFT_MODES, f"must be one of {FFT_MODES}"),
            ("value_mode", self.value_mode in VALUE_MODES, f"must be one of {VALUE_MODES}"),
            ("key_requant", self.key_requant in KEY_REQUANT, f"must be one of {KEY_REQUANT}"),
            ("value_mode", self.value_mode != "uniform1" or self.experimental, "uniform1 requires experimental"),
            ("p", self.p == 0 or self.value_mode == "ternary_stp", "p > 0 requires value_mode ternary_stp"),
            ("R", self.key_requant != "frozen_incremental" or self.R % self.G == 0,
             "frozen_incremental requires R % G == 0"),
        ]
        bad = [f"{name} ({why})" for name, ok, why in checks if not ok]
        if bad:
            raise ConfigError(f"invalid config values: {'; '.join(bad)}")

    @property
    def fft_enabled(self) -> bool:
        if self.fft_mode == "auto":
            return any(abs(self.key_k - k) < 1e-12 for k in FFT_AUTO_K)
        return self.fft_mode == "on"

    @property
    def flush_value_mode(self) -> str:
        # decode-time flushes use plain 1.58-bit quantization, never STP
        return "ternary" if self.value_mode == "ternary_stp" else self.value_mode

    def label(self) -> str:
        if self.identity:
            return "identity"
        return f"k{self.key_k:g}-{self.key_metric}-fft{int(self.fft_enabled)}-{self.value_mode}-p{self.p:g}"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def replace(self, **changes) -> "QuantConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_dict(cls, raw: dict) -> "QuantConfig":
        unknown = sorted(set(raw) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        types = {f.name: f.type for f in fields(cls)}
        coerced = {}
        for key, value in raw.items():
            kind = types[key]
            try:
                if kind == "bool":
                    if not isinstance(value, bool):
                        raise TypeError
                    coerced[key] = value
                elif kind == "int":
                    if isinstance(value, bool) or int(value) != value:
                        raise TypeError
                    coerced[key] = int(value)
                elif kind == "float":
                    if isinstance(value, bool):
                        raise TypeError
                    coerced[key] = float(value)
                else:
                    if not isinstance(value, str):
                        raise TypeError
                    coerced[key] = value
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r} has wrong type: {value!r}") from None
        return cls(**coerced)

    @classmethod
    def load(cls, path: str | Path) -> "QuantConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must be a flat JSON object")
        return cls.from_dict(raw)
