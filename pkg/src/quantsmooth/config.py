"""Run configuration shared by the command line and the ablation harness."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import FormatError

TOOL_VERSION = "0.1.0"

BITS = {"w4a4": (4, 4), "w6a6": (6, 6), "w8a8": (8, 8)}
SCHEMES = ("naive", "rotation", "scale", "dsfq")


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 0.5
    keep: float = 0.2
    clusters: int = 8
    budget: int = 40
    pool: int = 400
    domains: int = 4
    outlier_frac: float = 0.05
    bits: str = "w4a4"
    scheme: str = "dsfq"
    layer_fraction: float = 0.5
    filter_mode: str = "keep-lowest"
    seeds: tuple = (0, 1, 2, 3, 4)
    model_seed: int = 0
    pool_seed: int = 0
    eval_size: int = 40
    eval_seed: int = 777
    # "fast" or "full" calibration search (see CalibConfig)
    calib: str = "fast"
    model: dict = field(default_factory=dict)  # ToyModelConfig overrides

    def __post_init__(self):
        if self.bits not in BITS:
            raise ValueError(f"bits must be one of {sorted(BITS)}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if not 0 < self.keep <= 1:
            raise ValueError("keep must be in (0, 1]")
        if self.pool % self.domains:
            raise ValueError("pool size must be a multiple of the domain count")
        if self.calib not in ("fast", "full"):
            raise ValueError("calib must be 'fast' or 'full'")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "model", dict(self.model))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise FormatError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise FormatError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **kw) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **{k: v for k, v in kw.items() if v is not None}})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def bit_pair(self) -> tuple:
        return BITS[self.bits]

    def toy_config(self):
        from .model import ToyModelConfig
        return ToyModelConfig(**{"seed": self.model_seed, **self.model})

    def calib_config(self):
        from .calibrate import CalibConfig
        return CalibConfig.fast() if self.calib == "fast" else CalibConfig()


def run_meta(cfg: RunConfig, seed=None) -> dict:
    """Stamp embedded in every output file."""
    return {"tool_version": TOOL_VERSION, "config_hash": cfg.digest(), "seed": seed, "config": cfg.to_dict()}
