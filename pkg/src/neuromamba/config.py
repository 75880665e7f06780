"""Pipeline configuration: JSON file, overridable from the command line."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigError, MissingFileError, NeuroMambaError
from .net import DEFAULT_ALPHA, DEFAULT_BETA, ModelConfig, ResolutionPrior
from .scan_orders import DEFAULT_SCAN, expand_scan_list

DEFAULT_BLOCK = (18, 160, 160)
THREADS_ENV = "NEUROMAMBA_THREADS"


@dataclass
class PipelineConfig:
    widths: Tuple[int, ...] = (16, 32, 64)
    downsample: Optional[Tuple[Tuple[int, int, int], ...]] = None
    n_state: int = 8
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    R_a: float = 40.0
    R_t: float = 4.0
    scan_variants: Tuple[str, ...] = DEFAULT_SCAN
    block: Tuple[int, int, int] = DEFAULT_BLOCK
    t_hi: float = 0.95
    t_lo: float = 0.05
    theta: float = 0.5
    merge_stat: str = "mean"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> "PipelineConfig":
        try:
            self.widths = tuple(int(w) for w in self.widths)
            self.block = tuple(int(b) for b in self.block)
            self.scan_variants = expand_scan_list(self.scan_variants)
            if self.downsample is not None:
                self.downsample = tuple(tuple(int(f) for f in fs) for fs in self.downsample)
            self.n_state = int(self.n_state)
            self.seed = int(self.seed)
            self.threads = int(self.threads)
            for name in ("alpha", "beta", "R_a", "R_t", "t_hi", "t_lo", "theta"):
                setattr(self, name, float(getattr(self, name)))
        except NeuroMambaError as exc:
            raise ConfigError(str(exc)) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed config value: {exc}") from None
        checks = [
            (self.R_a > 0 and self.R_t > 0, "R_a and R_t must be positive"),
            (len(self.block) == 3 and min(self.block) >= 1, "block must be three positive extents"),
            (0.0 <= self.t_lo <= self.t_hi <= 1.0, "need 0 <= t_lo <= t_hi <= 1"),
            (0.0 <= self.theta <= 1.0, "theta must lie in [0, 1]"),
            (self.merge_stat in ("mean", "quantile75"), "merge_stat must be mean or quantile75"),
            (self.n_state >= 1, "n_state must be >= 1"),
            (self.threads >= 1, "threads must be >= 1"),
            (0 <= self.seed < 2 ** 64, "seed must be an unsigned 64-bit integer"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        self.model_config()  # widths / downsample checks
        return self

    @property
    def prior(self) -> ResolutionPrior:
        return ResolutionPrior(self.R_a, self.R_t, self.alpha, self.beta)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(widths=self.widths, downsample=self.downsample, n_state=self.n_state,
                               prior=self.prior, scan_variants=self.scan_variants, seed=self.seed)
        except NeuroMambaError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> Dict[str, Any]:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"config not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def override(self, **kwargs) -> "PipelineConfig":
        raw = self.to_json()
        raw.update({k: v for k, v in kwargs.items() if v is not None})
        return PipelineConfig.from_dict(raw)


def threads_from_env(default: int = 1) -> int:
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return default
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n
