"""Run configuration: architecture sizes, loss toggles, training and data setup.

Configs are flat dataclasses serialized as JSON. Overrides use
``key=value`` strings with dotted paths for the nested ``data`` block
(e.g. ``data.n_per_split=32``); values parse as JSON literals with a
fallback to plain strings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


def default_data_spec() -> dict[str, Any]:
    return {"kind": "synthetic", "seed": 42, "n_per_split": 64, "d_v": 35, "d_a": 74, "vocab": 1000}


@dataclass
class RunConfig:
    # architecture
    d_t: int = 64
    d_t_p: int = 64
    d_c: int = 32
    d_f: int = 64
    d_h: int = 32
    heads: int = 4
    layers: int = 6  # L, transformer depth of the sentiment stack
    split_layer: int = 4  # N, shallow/deep split with 1 <= N < L
    max_positions: int = 64
    dropout: float = 0.1
    activation: str = "gelu"
    # alignment
    tau: float = 0.07
    alignment_layer: int | None = None  # k in 1..L+2; None resolves to L
    symmetric_contrastive: bool = False
    clamp_ccl_sim: bool = False
    personality_trainable: bool = False
    use_modality_type_emb: bool = True
    feed_raw_features: bool = False  # pre-fusion reads raw frames instead of LSTM states
    # loss / module toggles
    use_align_ps: bool = True
    use_clm: bool = True
    use_personality: bool = True
    use_prefusion: bool = True
    use_enhanced_fusion: bool = True
    # training
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    max_steps: int | None = None
    seed: int = 0
    select_metric: str = "mae"  # validation selection: "mae" or "acc2"
    save_weights: bool = True
    # data and outputs
    data: dict[str, Any] = field(default_factory=default_data_spec)
    out_dir: str = "runs"

    def resolved(self) -> "RunConfig":
        """Copy with defaults filled in (alignment layer defaults to L)."""
        cfg = dataclasses.replace(self)
        if cfg.alignment_layer is None:
            cfg.alignment_layer = cfg.layers
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not (1 <= self.split_layer < self.layers):
            raise ValueError(f"split layer N={self.split_layer} must satisfy 1 <= N < L={self.layers}")
        if self.alignment_layer is not None and not (1 <= self.alignment_layer <= self.layers + 2):
            raise ValueError(f"alignment layer {self.alignment_layer} outside 1..L+2={self.layers + 2}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.d_f % self.heads != 0 or self.d_t % self.heads != 0 or self.d_t_p % self.heads != 0:
            raise ValueError("head count must divide d_f, d_t and d_t_p")
        if self.select_metric not in ("mae", "acc2"):
            raise ValueError(f"unknown selection metric {self.select_metric!r}")
        if self.data.get("kind") not in ("synthetic", "archive"):
            raise ValueError("data.kind must be 'synthetic' or 'archive'")
        if self.data.get("kind") == "archive" and not self.data.get("path"):
            raise ValueError("data.kind='archive' requires data.path")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def hash(self) -> str:
        """Digest of everything that affects the computation (not persistence)."""
        obj = {k: v for k, v in self.to_dict().items() if k not in ("out_dir", "save_weights")}
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` strings; dotted keys reach into the data block."""
    obj = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = _parse_value(raw)
        parts = key.split(".")
        target = obj
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ValueError(f"unknown config key {key!r}")
            target = target[part]
        if parts[-1] not in target and len(parts) == 1:
            raise ValueError(f"unknown config key {key!r}")
        target[parts[-1]] = value
    return RunConfig.from_dict(obj)
