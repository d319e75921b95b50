"""Shared test utilities: small configs, dense gradient checks, instrumented audio."""
from __future__ import annotations

import dataclasses

import numpy as np

from streamdiar.autodiff import Tensor, no_grad
from streamdiar.config import (CorpusConfig, EvalConfig, FeatureConfig,
                               ModelConfig, RunConfig, StageSpec, StreamConfig,
                               TrainConfig)
from streamdiar.model import DiarizationModel
from streamdiar.rng import stream

# ======================================================================
# Small configurations
#
# Model unit tests use a width-16 model so dense finite-difference checks and
# repeated forward passes stay fast. Engine and training tests use a full
# RunConfig with a 0.96 s block so one block is 96 activity frames.
# ======================================================================


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        dim=16,
        emb_dim=8,
        n_heads=2,
        ffn_dim=24,
        enc_blocks=1,
        dec_blocks=1,
        conv_kernel=5,
        capacity=4,
        n_table=8,
        n_mels=8,
        extractor_channels=8,
        extractor_layers=1,
        extractor_kernel=3,
        ssp_segment=2,
        aux_pool_width=8,
        out_frames=96,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_feature_config(**overrides) -> FeatureConfig:
    base = dict(n_mels=8, frame_len=0.025, frame_shift=0.010)
    base.update(overrides)
    return FeatureConfig(**base)


def tiny_run_config(**overrides) -> RunConfig:
    cfg = RunConfig(
        corpus=CorpusConfig(n_speakers=5, n_adapt_speakers=3, block_len=0.96,
                            seg_max=0.40),
        features=tiny_feature_config(),
        model=tiny_model_config(),
        training=TrainConfig(
            stages=(StageSpec(steps=2, lr=1e-3, freeze_extractor=True),
                    StageSpec(steps=2, lr=1e-3, adapt_frac=0.5)),
            batch_size=2,
            validate_every=2,
            val_recordings=1,
            val_len=1.92,
        ),
        stream=StreamConfig(block_len=0.96, chunk_len=0.32, right_len=0.32),
        eval=EvalConfig(n_recordings=1, duration=1.92),
    )
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def tiny_model(seed: int = 0, **overrides) -> DiarizationModel:
    return DiarizationModel(tiny_model_config(**overrides), stream(seed, "tiny-model"))


# ======================================================================
# Dense finite-difference gradient check
#
# Independent of the package's own sampled checker: probes every coordinate of
# every supplied tensor with central differences and compares against the
# reverse-mode gradient using a norm-based relative error.
# ======================================================================


def dense_grad_err(build, arrays: list[np.ndarray], eps: float = 1e-3) -> float:
    """Max relative gradient error of a scalar-valued function of arrays.

    build(*tensors) must return a scalar Tensor and be deterministic. Returns
    max over inputs of ||analytic - numeric|| / max(||analytic||, ||numeric||, 1).
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64).copy(), requires_grad=True)
               for a in arrays]
    out = build(*tensors)
    if out.data.size != 1:
        raise ValueError("build must return a scalar")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]

    def value(points: list[np.ndarray]) -> float:
        with no_grad():
            return float(build(*[Tensor(p) for p in points]).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        numeric = np.zeros_like(t.data)
        base = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
        flat = base[i].reshape(-1)
        nflat = numeric.reshape(-1)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + eps
            hi = value(base)
            flat[c] = orig - eps
            lo = value(base)
            flat[c] = orig
            nflat[c] = (hi - lo) / (2.0 * eps)
        scale = max(np.linalg.norm(analytic[i]), np.linalg.norm(numeric), 1.0)
        worst = max(worst, float(np.linalg.norm(analytic[i] - numeric) / scale))
    return worst


def param_grad_err(loss_fn, params: dict, eps: float = 1e-3,
                   sample: int | None = None, seed: int = 0) -> float:
    """Dense (or sampled) central-difference check for in-place parameters.

    loss_fn() -> scalar Tensor computed from the live parameter objects.
    Probes every coordinate unless sample caps the count per parameter.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            coords = stream(seed, "probe", name).choice(flat.size, size=sample,
                                                        replace=False)
        numeric = np.zeros(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                hi = float(loss_fn().data)
            flat[c] = orig - eps
            with no_grad():
                lo = float(loss_fn().data)
            flat[c] = orig
            numeric[j] = (hi - lo) / (2.0 * eps)
        a = analytic[name].reshape(-1)[coords]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), 1.0)
        worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
    for p in params.values():
        p.grad = None
    return worst


# ======================================================================
# Instrumented audio source
# ======================================================================


class TracingSource:
    """Array-like audio source that records the highest sample index read.

    The inference engine must only touch samples through len() and slicing, so
    the high-water mark after each emitted chunk bounds its true lookahead.
    """

    def __init__(self, samples: np.ndarray):
        self._samples = np.asarray(samples)
        self.max_read = -1

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, key):
        if isinstance(key, slice):
            hi = key.stop if key.stop is not None else len(self._samples)
            hi = min(hi, len(self._samples))
            if hi - 1 > self.max_read:
                self.max_read = hi - 1
        else:
            raise TypeError("engine must read audio through slices")
        return self._samples[key]
