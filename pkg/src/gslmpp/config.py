"""Run configuration: flat ``key = value`` files with typed, range-checked fields.

Example file::

    # FreeSolv, tuned
    data = tests/data/freesolv.csv
    task = regression
    seeds = 0,1,2
    gsl_skip_conn = 0.8

Blank lines and ``#`` comments are ignored.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

VARIANTS = ("full", "not-any", "only-a0", "only-gsl", "no-gsl-loss")


class ConfigError(ValueError):
    pass


def _choice(*values):
    return {"choices": values}


def _range(lo, hi):
    return {"range": (lo, hi)}


@dataclass
class RunConfig:
    # data
    data: str = ""
    smiles_column: str = "smiles"
    label_columns: list = field(default_factory=list)
    task: str = ""
    name: str = ""
    ignore_stereo: bool = True
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"

    # hyper-parameters with published ranges
    max_lr: float = field(default=1e-3, metadata=_range(1e-4, 1e-2))
    weight_decay: float = field(default=1e-5, metadata=_range(1e-5, 1e-3))
    gin_layers: int = field(default=3, metadata=_range(2, 5))
    gin_hidden_size: int = field(default=64, metadata=_choice(32, 64, 128, 256))
    tc_epsilon: float = field(default=0.3, metadata=_range(0.0, 0.7))
    gsl_iter: int = field(default=2, metadata=_range(1, 5))
    gsl_gnn_layers: int = field(default=2, metadata=_choice(2, 3))
    gsl_hidden_size: int = field(default=64, metadata=_choice(32, 64, 128, 256))
    gsl_epsilon: float = field(default=0.0, metadata=_range(0.0, 0.5))
    gsl_perspective: int = field(default=4, metadata=_choice(1, 2, 4, 8, 16))
    gsl_skip_conn: float = field(default=0.8, metadata=_range(0.1, 0.9))
    gsl_update_ratio: float = field(default=0.6, metadata=_range(0.1, 1.0))
    dropout: float = field(default=0.1, metadata=_range(0.0, 0.6))
    gsl_coff: float = field(default=0.5, metadata=_range(0.1, 0.9))

    # fixed training protocol
    max_epoch: int = 300
    warmup_epochs: int = 2
    final_lr: float = 1e-9
    eps_y: float = 0.01
    ecfp_radius: int = 2
    ecfp_bits: int = 2048

    # design switches
    readout: str = field(default="mean", metadata=_choice("mean", "sum"))
    gsl_adj_norm: str = field(default="separate", metadata=_choice("none", "row", "sym", "separate"))
    gsl_loss_raw_sum: bool = False
    freeze_encoder: bool = False
    exclude_test_from_msg: bool = False
    variant: str = field(default="full", metadata=_choice(*VARIANTS))
    anchors: int = 0
    gsl_loss_pairs: int = 20000
    encoder_chunk: int = 0          # molecules per encoder chunk; 0 encodes the whole corpus at once
    split: str = field(default="scaffold", metadata=_choice("scaffold", "random"))

    # ------------------------------------------------------------ parsing

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, items: dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        changes = {}
        for key, raw in items.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(known[key], raw)
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        items = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            k, v = line.split("=", 1)
            items[k.strip()] = v.strip()
        return cls().with_overrides(items)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text())

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    # ------------------------------------------------------------ validation

    def validate(self, allow_out_of_range: bool = False) -> "RunConfig":
        for f in fields(self):
            v = getattr(self, f.name)
            meta = f.metadata
            # switches with fixed vocabularies are always enforced
            strict = isinstance(v, str) or not allow_out_of_range
            if "choices" in meta and strict and v not in meta["choices"]:
                raise ConfigError(f"{f.name} = {v!r} not in {list(meta['choices'])}")
            if "range" in meta and strict:
                lo, hi = meta["range"]
                if not (lo <= v <= hi):
                    raise ConfigError(f"{f.name} = {v} outside [{lo}, {hi}]")
        if self.task and self.task not in ("classification", "regression"):
            raise ConfigError(f"task = {self.task!r} must be classification or regression")
        if not (0.0 <= self.gsl_skip_conn <= 1.0 and 0.0 <= self.gsl_update_ratio <= 1.0):
            raise ConfigError("gsl_skip_conn and gsl_update_ratio must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout = {self.dropout} must lie in [0, 1)")
        if self.max_epoch < 1 or self.warmup_epochs < 0:
            raise ConfigError("max_epoch must be >= 1 and warmup_epochs >= 0")
        if self.eps_y <= 0:
            raise ConfigError("eps_y must be > 0")
        if self.anchors < 0 or self.encoder_chunk < 0:
            raise ConfigError("anchors and encoder_chunk must be >= 0")
        if self.anchors and self.exclude_test_from_msg:
            raise ConfigError("exclude_test_from_msg is only supported with the dense graph (anchors = 0)")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        return self


def _coerce(f: dataclasses.Field, raw):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return [int(p) for p in parts] if f.name == "seeds" else parts
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw
