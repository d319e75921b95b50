"""Dual-decoder diarization model.

A convolutional extractor turns log-mel frames into frame-level speaker
embeddings X; a conformer encoder adds temporal context to produce Z. The
detection decoder reads Z with per-slot speaker embeddings as auxiliary
queries and emits each slot's voice-activity probabilities. The representation
decoder reads X with per-slot voice activities as auxiliary queries and emits
one unit-norm speaker embedding per slot. Auxiliary information enters
additively: queries as state + Linear(aux)/sqrt(D), keys as features +
Linear(positions)/sqrt(D). Cross-attention precedes self-attention because the
first block's decoder state is all zeros.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat
from .config import ModelConfig
from .nn import (LayerNorm, Linear, Module, MultiHeadAttention, Parameter,
                 ConformerBlock, FeedForward, sinusoidal_positions, xavier_uniform)


class ModelError(ValueError):
    """Raised for inputs that violate the model's shape contracts."""


def unit_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of (..., S) to unit norm; exact-zero rows pass through."""
    norms = (x * x).sum(axis=-1, keepdims=True)
    return x * ((norms + eps) ** -0.5)


def conv1d(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """Channel-mixing convolution along time with same padding.

    x: (..., T, Cin); weight: (K, Cin, Cout); bias: (Cout,).
    """
    kernel = weight.shape[0]
    t = x.shape[-2]
    pad_left = (kernel - 1) // 2
    pad_right = kernel - 1 - pad_left
    zl = Tensor(np.zeros(x.shape[:-2] + (pad_left, x.shape[-1])))
    zr = Tensor(np.zeros(x.shape[:-2] + (pad_right, x.shape[-1])))
    padded = concat([zl, x, zr], axis=-2)
    lead = (slice(None),) * (x.ndim - 2)
    out = None
    for j in range(kernel):
        term = padded[lead + (slice(j, j + t), slice(None))] @ weight[j]
        out = term if out is None else out + term
    return out + bias


# ======================================================================
# Extractor
# ======================================================================

class Extractor(Module):
    """Conv stack over time x mel, segmental statistical pooling, projection.

    Pooling splits time into fixed segments of ssp_segment frames and
    concatenates per-segment mean and standard deviation; with segment 1 the
    std channel is constant and the pooling degenerates to a projection.
    Output length is T / ssp_segment.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = cfg.extractor_channels
        self.convs_w = []
        self.convs_b = []
        c_in = cfg.n_mels
        for _ in range(cfg.extractor_layers):
            fan = xavier_uniform(rng, cfg.extractor_kernel * c_in, chans)
            self.convs_w.append(Parameter(
                fan.reshape(cfg.extractor_kernel, c_in, chans)))
            self.convs_b.append(Parameter(np.zeros(chans)))
            c_in = chans
        self.proj = Linear(2 * chans, cfg.dim, rng)

    def __call__(self, feats: Tensor) -> Tensor:
        seg = self.cfg.ssp_segment
        t = feats.shape[-2]
        if t % seg != 0:
            raise ModelError(f"frame count {t} not divisible by ssp_segment {seg}")
        x = feats
        for w, b in zip(self.convs_w, self.convs_b):
            x = conv1d(x, w, b).silu()
        *lead, _, chans = x.shape
        x = x.reshape(*lead, t // seg, seg, chans)
        mean = x.mean(axis=-2)
        centered = x - Tensor(x.data.mean(axis=-2, keepdims=True))
        var = (centered * centered).mean(axis=-2)
        std = (var + 1e-10).sqrt()
        pooled = concat([mean, std], axis=-1)
        return self.proj(pooled)


# ======================================================================
# Encoder
# ======================================================================

class Encoder(Module):
    """Sinusoidal positions plus a stack of conformer blocks, then LayerNorm."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [ConformerBlock(cfg.dim, cfg.n_heads, cfg.ffn_dim,
                                      cfg.conv_kernel, rng)
                       for _ in range(cfg.enc_blocks)]
        self.norm_out = LayerNorm(cfg.dim)
        self._pos_cache: dict[int, np.ndarray] = {}

    def positions(self, n_pos: int) -> np.ndarray:
        if n_pos not in self._pos_cache:
            self._pos_cache[n_pos] = sinusoidal_positions(
                n_pos, self.cfg.dim, self.cfg.pos_wavelength)
        return self._pos_cache[n_pos]

    def __call__(self, x: Tensor) -> Tensor:
        z = x + Tensor(self.positions(x.shape[-2]))
        for block in self.blocks:
            z = block(z)
        return self.norm_out(z)


# ======================================================================
# Decoder
# ======================================================================

def fuse_queries(x_dec: Tensor, q_aux: Tensor, proj: Linear) -> Tensor:
    """Decoder state plus projected auxiliary queries, scaled by 1/sqrt(D)."""
    dim = x_dec.shape[-1]
    return x_dec + proj(q_aux) * (1.0 / np.sqrt(dim))


def fuse_keys(x_fea: Tensor, k_pos: Tensor, proj: Linear) -> Tensor:
    """Feature embeddings plus projected position codes, scaled by 1/sqrt(D)."""
    dim = x_fea.shape[-1]
    return x_fea + proj(k_pos) * (1.0 / np.sqrt(dim))


class DecoderBlock(Module):
    """Cross-attention over features, then slot self-attention, then FFN.

    All attention inputs are pre-normalized; residuals ride on the raw state.
    """

    def __init__(self, cfg: ModelConfig, aux_width: int, rng: np.random.Generator):
        dim = cfg.dim
        self.q_proj = Linear(aux_width, dim, rng, bias=False)
        self.k_proj = Linear(dim, dim, rng, bias=False)
        self.norm_q = LayerNorm(dim)
        self.norm_k = LayerNorm(dim)
        self.norm_v = LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, cfg.n_heads, rng)
        self.norm_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, cfg.n_heads, rng)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, cfg.ffn_dim, rng)

    def __call__(self, x_dec: Tensor, feats: Tensor, pos: Tensor,
                 aux: Tensor) -> Tensor:
        q = self.norm_q(fuse_queries(x_dec, aux, self.q_proj))
        k = self.norm_k(fuse_keys(feats, pos, self.k_proj))
        v = self.norm_v(feats)
        x = x_dec + self.cross(q, k, v)
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, h)
        return x + self.ffn(self.norm_ffn(x))


class Decoder(Module):
    """Stack of decoder blocks; the initial decoder state is zeros."""

    def __init__(self, cfg: ModelConfig, aux_width: int, rng: np.random.Generator):
        self.blocks = [DecoderBlock(cfg, aux_width, rng)
                       for _ in range(cfg.dec_blocks)]

    def __call__(self, feats: Tensor, pos: Tensor, aux: Tensor) -> Tensor:
        n_slots = aux.shape[-2]
        dim = feats.shape[-1]
        x = Tensor(np.zeros(aux.shape[:-2] + (n_slots, dim)))
        for block in self.blocks:
            x = block(x, feats, pos, aux)
        return x


# ======================================================================
# Full model
# ======================================================================

class DiarizationModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.extractor = Extractor(cfg, rng)
        self.encoder = Encoder(cfg, rng)
        self.det_decoder = Decoder(cfg, cfg.emb_dim, rng)
        self.det_head = Linear(cfg.dim, cfg.out_frames, rng)
        self.rep_decoder = Decoder(cfg, cfg.aux_pool_width, rng)
        self.rep_head = Linear(cfg.dim, cfg.emb_dim, rng)
        # Global speaker-embedding table: random unit rows. The pseudo-speaker
        # and non-speech embeddings start at exactly zero.
        table = rng.standard_normal((cfg.n_table, cfg.emb_dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        self.table = Parameter(table)
        self.emb_pseudo = Parameter(np.zeros(cfg.emb_dim))
        self.emb_nonspeech = Parameter(np.zeros(cfg.emb_dim))

    # ------------------------------------------------------------------
    # ops
    # ------------------------------------------------------------------

    def extract_frames(self, feats: Tensor | np.ndarray) -> Tensor:
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        if feats.shape[-1] != self.cfg.n_mels:
            raise ModelError(f"expected {self.cfg.n_mels} mel channels, "
                             f"got {feats.shape[-1]}")
        return self.extractor(feats)

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def detect(self, z: Tensor, emb: Tensor | np.ndarray) -> Tensor:
        """Voice-activity probabilities (..., N, out_frames) for each slot.

        Embedding rows are unit-normalized internally; exact-zero rows (the
        initial pseudo/non-speech embeddings) pass through unchanged.
        """
        emb = emb if isinstance(emb, Tensor) else Tensor(emb)
        aux = unit_rows(emb)
        pos = Tensor(self.encoder.positions(z.shape[-2]))
        slots = self.det_decoder(z, pos, aux)
        return self.det_head(slots).sigmoid()

    def pool_activity(self, y: Tensor) -> Tensor:
        """Average-pool activity rows (..., N, T') to the auxiliary width."""
        width = self.cfg.aux_pool_width
        t = y.shape[-1]
        stride = int(np.ceil(t / width))
        padded_len = width * stride
        if padded_len != t:
            pad = Tensor(np.zeros(y.shape[:-1] + (padded_len - t,)))
            y = concat([y, pad], axis=-1)
        *lead, n, _ = y.shape
        return y.reshape(*lead, n, width, stride).mean(axis=-1)

    def represent(self, x: Tensor, y: Tensor | np.ndarray) -> Tensor:
        """Unit-norm speaker embedding (..., N, emb_dim) for each activity row."""
        y = y if isinstance(y, Tensor) else Tensor(y)
        aux = self.pool_activity(y)
        pos = Tensor(self.encoder.positions(x.shape[-2]))
        slots = self.rep_decoder(x, pos, aux)
        return unit_rows(self.rep_head(slots))

    def lookup(self, onehot: Tensor | np.ndarray) -> Tensor:
        """Select table rows by one-hot (or soft) weights: onehot @ table."""
        onehot = onehot if isinstance(onehot, Tensor) else Tensor(onehot)
        return onehot @ self.table

    def renormalize_table(self) -> None:
        """Rescale table rows to unit norm in place (post-optimizer hook)."""
        norms = np.linalg.norm(self.table.data, axis=1, keepdims=True)
        np.divide(self.table.data, norms, out=self.table.data, where=norms > 0)

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params().items()}


def make_onehot(ids: np.ndarray | list[int], n_classes: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (n_classes,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out
