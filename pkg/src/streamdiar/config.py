"""Run configuration: nested dataclasses with strict JSON (de)serialization.

A single RunConfig document drives corpus simulation, feature extraction, the
model, training, streaming inference, and scoring. Unknown keys are rejected so
a typo in a config file fails loudly instead of silently using a default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration documents."""


# ======================================================================
# Sections
# ======================================================================

@dataclass
class CorpusConfig:
    sample_rate: int = 16000
    n_speakers: int = 200
    n_adapt_speakers: int = 40
    resolution: float = 0.010
    block_len: float = 8.0
    seg_max: float = 4.0
    # Mixture protocol: probability of drawing 1, 2, or 3 speakers per mixture,
    # and the per-speaker speech-budget fraction range for each count. The
    # 3-speaker budget is lower; speakers talk less in larger conversations,
    # which is what the target pooled overlap statistics require.
    count_weights: tuple[float, ...] = (0.40, 0.30, 0.30)
    budget_frac: tuple[tuple[float, float], ...] = (
        (0.36, 0.60),
        (0.36, 0.60),
        (0.24, 0.46),
    )

    def __post_init__(self) -> None:
        if len(self.count_weights) != len(self.budget_frac):
            raise ConfigError("count_weights and budget_frac must align")
        if abs(sum(self.count_weights) - 1.0) > 1e-9:
            raise ConfigError("count_weights must sum to 1")
        if self.block_len <= 0 or self.resolution <= 0:
            raise ConfigError("block_len and resolution must be positive")


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    n_mels: int = 24
    frame_len: float = 0.025
    frame_shift: float = 0.010
    fmin: float = 40.0
    fmax: float | None = None
    normalize: bool = True

    def __post_init__(self) -> None:
        if self.frame_shift <= 0 or self.frame_len < self.frame_shift:
            raise ConfigError("need frame_len >= frame_shift > 0")


@dataclass
class ModelConfig:
    dim: int = 64                 # attention width shared by encoder and decoders
    emb_dim: int = 32             # speaker-embedding width
    n_heads: int = 4
    ffn_dim: int = 128
    enc_blocks: int = 2
    dec_blocks: int = 2
    conv_kernel: int = 15
    capacity: int = 6             # decoder speaker slots per block
    n_table: int = 240            # rows of the global speaker-embedding table
    n_mels: int = 24
    extractor_channels: int = 64
    extractor_layers: int = 2
    extractor_kernel: int = 5
    ssp_segment: int = 4          # frames per statistical-pooling segment (time downsampling)
    aux_pool_width: int = 64      # activity rows are pooled to this width for the representation decoder
    out_frames: int = 800         # activity frames emitted per block
    pos_wavelength: float = 10000.0

    def __post_init__(self) -> None:
        if self.dim % self.n_heads != 0:
            raise ConfigError("dim must be divisible by n_heads")
        if self.conv_kernel % 2 != 1:
            raise ConfigError("conv_kernel must be odd")
        if self.ssp_segment < 1:
            raise ConfigError("ssp_segment must be >= 1")
        if self.capacity < 2:
            raise ConfigError("capacity must allow the pseudo slot plus one speaker")


@dataclass
class StageSpec:
    steps: int
    lr: float
    freeze_extractor: bool = False
    adapt_frac: float = 0.0       # fraction of examples drawn from the adaptation corpus

    def __post_init__(self) -> None:
        if self.steps < 0 or self.lr <= 0:
            raise ConfigError("stage needs steps >= 0 and lr > 0")
        if not 0.0 <= self.adapt_frac <= 1.0:
            raise ConfigError("adapt_frac must lie in [0, 1]")


@dataclass
class TrainConfig:
    stages: tuple[StageSpec, ...] = (
        StageSpec(steps=2000, lr=1e-3, freeze_extractor=True, adapt_frac=0.0),
        StageSpec(steps=1500, lr=3e-4, freeze_extractor=False, adapt_frac=0.2),
        StageSpec(steps=1000, lr=3e-5, freeze_extractor=False, adapt_frac=0.2),
    )
    batch_size: int = 8
    validate_every: int = 200
    mask_prob: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    arc_scale: float = 32.0
    arc_margin: float = 0.2
    distill_weight: float = 1.0
    val_recordings: int = 4
    val_len: float = 24.0

    def __post_init__(self) -> None:
        if len(self.stages) == 3:
            s2, s3 = self.stages[1], self.stages[2]
            if abs(s3.lr - s2.lr / 10.0) > 1e-12 * s2.lr:
                raise ConfigError("final stage lr must be one tenth of stage 2 lr")
        if not self.stages or self.batch_size < 1:
            raise ConfigError("need at least one stage and batch_size >= 1")


@dataclass
class StreamConfig:
    block_len: float = 8.0
    chunk_len: float = 0.64
    right_len: float = 0.64
    left_len: float | None = None  # derived as block_len - chunk_len - right_len
    resolution: float = 0.010
    tau_new: float = 50.0          # soft-frame threshold for enrolling a new speaker
    tau_update: float = 50.0       # soft-frame threshold for appending to the buffer
    binarize: float = 0.5

    def __post_init__(self) -> None:
        if self.left_len is None:
            derived = self.block_len - self.chunk_len - self.right_len
            # Clear float dust so a context that is exactly zero stays zero.
            self.left_len = 0.0 if abs(derived) < 1e-9 else derived
        total = self.left_len + self.chunk_len + self.right_len
        if abs(total - self.block_len) > 1e-9:
            raise ConfigError(
                f"left+chunk+right must equal block_len, got {total} != {self.block_len}")
        if self.chunk_len <= 0 or self.right_len < 0 or self.left_len < 0:
            raise ConfigError("chunk_len must be positive, contexts non-negative")
        for name in ("block_len", "chunk_len", "right_len", "left_len"):
            frames = getattr(self, name) / self.resolution
            if abs(frames - round(frames)) > 1e-6:
                raise ConfigError(f"{name} must be an integer number of frames")

    @property
    def latency(self) -> float:
        """Algorithmic latency: the chunk itself plus the awaited right context."""
        return self.chunk_len + self.right_len

    def frames(self, name: str) -> int:
        return int(round(getattr(self, f"{name}_len") / self.resolution))


@dataclass
class ScoringConfig:
    resolution: float = 0.010
    collar: float = 0.0


@dataclass
class EvalConfig:
    n_recordings: int = 50
    duration: float = 60.0


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        out_frames = self.corpus.block_len / self.corpus.resolution
        if self.model.out_frames != int(round(out_frames)):
            raise ConfigError(
                f"model.out_frames={self.model.out_frames} must equal "
                f"block_len/resolution={out_frames:g}")
        if self.model.n_mels != self.features.n_mels:
            raise ConfigError("model.n_mels must match features.n_mels")
        if self.model.n_table < self.corpus.n_speakers + self.corpus.n_adapt_speakers:
            raise ConfigError("embedding table smaller than the total speaker inventory")


# ======================================================================
# Presets and strict (de)serialization
# ======================================================================

def desk_preset() -> RunConfig:
    """Small configuration that trains on a CPU in well under two hours."""
    return RunConfig()


def paper_preset() -> RunConfig:
    """Full-scale configuration (expensive; for completeness, not CI)."""
    return RunConfig(
        corpus=CorpusConfig(n_speakers=5000, n_adapt_speakers=1000),
        features=FeatureConfig(n_mels=80),
        model=ModelConfig(
            dim=256, emb_dim=256, n_heads=8, ffn_dim=512,
            enc_blocks=4, dec_blocks=4, conv_kernel=15, capacity=30,
            n_table=6000, n_mels=80, extractor_channels=256,
            extractor_layers=4, aux_pool_width=64, out_frames=800,
        ),
        training=TrainConfig(
            stages=(
                StageSpec(steps=100_000, lr=1e-4, freeze_extractor=True, adapt_frac=0.0),
                StageSpec(steps=75_000, lr=1e-4, freeze_extractor=False, adapt_frac=0.2),
                StageSpec(steps=50_000, lr=1e-5, freeze_extractor=False, adapt_frac=0.2),
            ),
            batch_size=16,
            validate_every=500,
        ),
    )


PRESETS = {"desk": desk_preset, "paper": paper_preset}

_SECTION_TYPES: dict[str, type] = {
    "corpus": CorpusConfig,
    "features": FeatureConfig,
    "model": ModelConfig,
    "training": TrainConfig,
    "stream": StreamConfig,
    "scoring": ScoringConfig,
    "eval": EvalConfig,
}


def _build(cls: type, data: Any, path: str):
    """Instantiate a dataclass from plain JSON data, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name == "stages":
            value = tuple(_build(StageSpec, s, f"{path}.stages[{i}]")
                          for i, s in enumerate(value))
        elif name == "count_weights":
            value = tuple(float(v) for v in value)
        elif name == "budget_frac":
            value = tuple((float(a), float(b)) for a, b in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            sections[name] = _build(cls, data[name], name)
    return RunConfig(**sections)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path, preset: str = "desk") -> RunConfig:
    """Load a JSON config on top of a preset; absent sections keep preset values."""
    base = config_to_dict(PRESETS[preset]())
    with open(path, "r", encoding="utf-8") as fh:
        try:
            overrides = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    merged = _merge(base, overrides, "")
    return config_from_dict(merged)


def _merge(base: dict, overrides: Any, path: str) -> dict:
    if not isinstance(overrides, dict):
        raise ConfigError(f"config{path}: expected an object")
    out = dict(base)
    for key, value in overrides.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{path}.{key}")
        else:
            out[key] = value
    return out


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)
