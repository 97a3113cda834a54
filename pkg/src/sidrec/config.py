"""Pipeline configuration: one flat, validated namespace shared by every stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

# Fields whose value changes the shape or meaning of persisted artifacts.
# Stages refuse to consume artifacts produced under a different structural hash.
STRUCTURAL_FIELDS = (
    "n_levels",
    "codebook_size",
    "code_dim",
    "d_content",
    "d_collab",
    "max_len",
    "enc_hidden",
    "d_model",
    "n_enc_layers",
    "n_dec_layers",
    "n_heads",
    "head_dim",
    "d_ff",
    "d_proj",
    "d_moe",
    "n_experts",
    "moe_top_k",
    "n_time_buckets",
)


@dataclass
class PipelineConfig:
    """Every knob of the pipeline, with defaults matching the reference setup."""

    # Semantic-ID structure
    n_levels: int = 3            # SID length L
    codebook_size: int = 256     # codes per level K
    code_dim: int = 32           # codebook embedding dimension

    # Input feature dimensions
    d_content: int = 768
    d_collab: int = 64

    # Quantizer encoder/decoder MLP widths
    enc_hidden: tuple[int, ...] = (512, 256)

    # Quantizer loss weights and knobs
    commit_weight: float = 0.25   # beta
    gate_weight: float = 0.8      # lambda_1
    anchor_weight: float = 0.2    # lambda_2
    gate_margin: float = 0.1      # delta, variance floor for the collab gate
    anchor_temp: float = 0.15     # softmax temperature for soft prototypes
    ema_decay: float = 0.99
    ema_eps: float = 1e-5

    # Recommender architecture
    d_model: int = 128
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    n_heads: int = 6
    head_dim: int = 64            # per-head width; attention inner dim = n_heads * head_dim
    d_ff: int = 1024
    d_proj: int = 64              # depth-specific content/collab projection width
    d_moe: int = 256
    n_experts: int = 3
    moe_top_k: int = 2
    eta_init: float = 0.1         # initial fusion-residual scale
    n_time_buckets: int = 32
    use_purified_collab: bool = False  # feed gated collab features to the fusion MoE

    # Recommender loss weights
    structure_weight: float = 5e-4  # gamma

    # Adaptive decoding temperature
    tau_min: float = 0.5
    tau_max: float = 1.0
    tau_alpha: float = 0.5
    n_ref: float | None = None    # default sqrt(|catalog|)/2, resolved at load time

    # Deduplication
    dedup_eps_scale: float = 0.05   # entropic regularization = scale * median(cost)
    dedup_max_iter: int = 500
    dedup_candidate_cap: int = 64

    # Training
    lr: float = 5e-4
    batch_size: int = 128
    quantizer_epochs: int = 300
    recommender_epochs: int = 200
    max_len: int = 20
    k_core: int = 5
    beam_width: int = 30
    valid_user_limit: int = 256   # users sampled for per-epoch validation metrics
    seed: int = 0

    # Paths (not part of the structural hash)
    interactions_path: str = ""
    content_matrix: str = ""
    content_index: str = ""
    collab_matrix: str = ""
    collab_index: str = ""
    tags_path: str = ""
    tag_matrix: str = ""
    tag_index: str = ""

    def __post_init__(self) -> None:
        if isinstance(self.enc_hidden, list):
            self.enc_hidden = tuple(self.enc_hidden)
        self.validate()

    def validate(self) -> None:
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be >= 1")
        if self.moe_top_k > self.n_experts:
            raise ValueError("moe_top_k cannot exceed n_experts")
        if not (0.0 < self.ema_decay < 1.0):
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.anchor_temp <= 0:
            raise ValueError("anchor_temp must be positive")
        if not (0.0 < self.tau_min <= self.tau_max):
            raise ValueError("need 0 < tau_min <= tau_max")
        if self.tau_alpha < 0:
            raise ValueError("tau_alpha must be >= 0")
        if self.n_ref is not None and self.n_ref <= 0:
            raise ValueError("n_ref must be positive")
        for name in ("commit_weight", "gate_weight", "anchor_weight", "structure_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def structural_hash(self) -> str:
        """Hash over fields that determine artifact shapes and compatibility."""
        payload = {name: getattr(self, name) for name in STRUCTURAL_FIELDS}
        blob = json.dumps(payload, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolve_n_ref(self, n_items: int) -> float:
        """Branching normalizer: explicit value if set, else sqrt(|catalog|)/2."""
        if self.n_ref is not None:
            return float(self.n_ref)
        return max(float(n_items) ** 0.5 / 2.0, 1.0)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["enc_hidden"] = list(self.enc_hidden)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


def load_config(path: str | Path) -> PipelineConfig:
    """Load a flat YAML mapping into a validated PipelineConfig."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a flat mapping")
    return PipelineConfig.from_dict(raw)


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
