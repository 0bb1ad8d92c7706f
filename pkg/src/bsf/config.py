"""Plain key = value training configuration files.

Example:

    # desk-scale run
    arch = conv:16 conv:16 pool conv:32 conv:32 pool fc:128 fc:10
    input = 1x28x28
    mode = separable-method1
    dataset = mnist
    data_dir = ./data
    epochs = 20
    batch_size = 100
    seed = 1
    lr_start = 3e-3
    lr_end = 3e-6
    metrics_csv = run.csv

Lines starting with '#' are comments.  Unknown keys are rejected so typos
fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Union

from .layers import CONV_MODES, MODE_FULL


@dataclass
class TrainConfig:
    arch: str = "conv:16 conv:16 pool conv:32 conv:32 pool fc:128 fc:10"
    input: str = "1x28x28"
    mode: str = MODE_FULL
    dataset: str = "mnist"
    data_dir: str = "."
    epochs: int = 20
    batch_size: int = 100
    seed: int = 1
    lr_start: float = 3e-3
    lr_end: float = 3e-6
    train_limit: int = 0  # 0 = use everything
    test_limit: int = 0
    val_checks_per_epoch: int = 1
    grad_table: str = "build"  # build | identity | <path to a saved table>
    dtype: str = "float32"
    metrics_csv: str = ""
    curve_csv: str = ""
    model_out: str = ""

    @property
    def input_shape(self) -> tuple[int, int, int]:
        parts = self.input.lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"input must be CxHxW, got {self.input!r}")
        c, h, w = (int(p) for p in parts)
        return (c, h, w)

    def validate(self) -> "TrainConfig":
        if self.mode not in CONV_MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {CONV_MODES}")
        if self.dataset not in ("mnist", "cifar10", "digits"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.input_shape
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_config(path: Union[str, Path]) -> TrainConfig:
    cfg = TrainConfig()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = _FIELD_TYPES[key]
        if kind == "int" or kind is int:
            setattr(cfg, key, int(value))
        elif kind == "float" or kind is float:
            setattr(cfg, key, float(value))
        else:
            setattr(cfg, key, value)
    return cfg.validate()


def write_config(cfg: TrainConfig, path: Union[str, Path]) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(TrainConfig)]
    Path(path).write_text("\n".join(lines) + "\n")
