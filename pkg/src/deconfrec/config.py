"""Run configuration: one flat record covering data, model, and training.

Every field has a default, so a run is fully specified by the subset of keys
a config file (YAML or JSON) chooses to override, plus any command-line
overrides on top. The config hash is the sha256 of the canonical (sorted-key)
JSON form, so it does not depend on key order in the source file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from .synthetic import SyntheticSpec


@dataclass(frozen=True)
class RunConfig:
    # data source: a dataset directory, or the built-in generator
    dataset_dir: str | None = None
    use_synthetic: bool = False
    synthetic_users: int = 500
    synthetic_items: int = 300
    synthetic_confounders: int = 4
    synthetic_confounder_strength: float = 0.8
    synthetic_exposure_bias: float = 0.5
    synthetic_outlier_fraction: float = 0.07
    synthetic_visual_dim: int = 64
    synthetic_textual_dim: int = 32

    # model
    embed_dim: int = 64
    latent_dim: int = 32
    num_strata: int = 8
    num_layers: int = 2
    knn_k: int = 10
    semantic_visual_weight: float = 0.5
    semantic_layers: int = 1
    diffusion_steps: int = 10
    beta_start: float = 1e-4
    beta_end: float = 0.3
    schedule_kind: str = "linear"
    soft_temperature: float = 1.0

    # training
    epochs: int = 50
    warm_epochs: int = 5
    batch_size: int = 2048
    learning_rate: float = 1e-3
    weight_diffusion: float = 0.1
    weight_vq: float = 0.1
    weight_contrastive: float = 0.05
    weight_l2: float = 1e-4
    commitment_weight: float = 0.25
    mask_temperature: float = 0.5
    mask_anneal: float = 0.98
    mask_temperature_floor: float = 0.1
    contrastive_temperature: float = 0.2
    patience: int = 20
    eval_ks: tuple[int, ...] = (10, 20)
    seed: int = 0

    # ablations (usage only; construction is identical across flags)
    disable_backdoor: bool = False
    disable_frontdoor: bool = False
    disable_dcd: bool = False

    output_dir: str | None = None

    def __post_init__(self):
        raw = self.eval_ks
        if isinstance(raw, str):
            raw = raw.split(",")
        elif isinstance(raw, int):
            raw = (raw,)
        try:
            ks = tuple(int(k) for k in raw)
        except (TypeError, ValueError):
            raise ValueError(f"eval_ks must be positive ints, got {self.eval_ks!r}") from None
        if not ks or min(ks) <= 0:
            raise ValueError(f"eval_ks must be positive ints, got {self.eval_ks}")
        object.__setattr__(self, "eval_ks", ks)
        if self.epochs < 1 or self.warm_epochs < 0:
            raise ValueError("epochs must be >= 1 and warm_epochs >= 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not 0 < self.mask_anneal <= 1:
            raise ValueError(f"mask_anneal must lie in (0, 1], got {self.mask_anneal}")
        for name in ("mask_temperature", "mask_temperature_floor",
                     "contrastive_temperature", "soft_temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        valid = [f.name for f in fields(cls)]
        unknown = sorted(set(data) - set(valid))
        if unknown:
            raise ValueError(
                f"unknown config keys {unknown}; valid keys are {sorted(valid)}"
            )
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["eval_ks"] = list(self.eval_ks)
        return out

    def hash(self) -> str:
        # output_dir is artifact plumbing: two runs that differ only in where
        # they write are the same run
        payload = {k: v for k, v in self.to_dict().items() if k != "output_dir"}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_users=self.synthetic_users,
            num_items=self.synthetic_items,
            num_confounders=self.synthetic_confounders,
            confounder_strength=self.synthetic_confounder_strength,
            exposure_bias_strength=self.synthetic_exposure_bias,
            seed=self.seed,
            outlier_fraction=self.synthetic_outlier_fraction,
            visual_dim=self.synthetic_visual_dim,
            textual_dim=self.synthetic_textual_dim,
        )


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Config file (YAML or JSON by extension) with overrides layered on top."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        text = p.read_text(encoding="utf-8")
        parsed = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
        if parsed is None:
            parsed = {}
        if not isinstance(parsed, dict):
            raise ValueError(f"config file {p} must contain a mapping at the top level")
        data = parsed
    if overrides:
        data.update(overrides)
    return RunConfig.from_dict(data)
