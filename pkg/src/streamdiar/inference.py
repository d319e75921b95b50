"""Blockwise online diarization engine and offline rescoring.

The engine slides a fixed block window over the audio in chunk-sized hops.
Each block is decoded with the current speaker inventory: slot 0 always holds
the pseudo-speaker embedding (a detector for not-yet-enrolled voices), the
following slots hold weighted means of the buffered embeddings, and the rest
are padded with the non-speech embedding. A slot's soft activity is scored by
its non-overlapped speech mass W; the pseudo slot enrolls a new speaker when
its W clears tau_new, and an enrolled slot's fresh embedding is appended to
the buffer when its W clears tau_update. Only the chunk region of each block
output is emitted, which keeps the output causal with algorithmic latency
chunk + right context.

Encoder outputs are cached per block so the final buffer can re-decode the
whole recording afterwards (offline rescoring) at a fraction of the cost.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .config import FeatureConfig, StreamConfig
from .features import logmel
from .model import DiarizationModel


class EngineError(RuntimeError):
    """Raised for stream-geometry violations or capacity overflow."""


# ======================================================================
# Window geometry
# ======================================================================

@dataclass(frozen=True)
class StreamGeometry:
    chunk_frames: int
    right_frames: int
    left_frames: int
    block_frames: int
    samples_per_frame: int
    total_frames: int             # ceil(duration / resolution)
    n_chunks: int


def stream_geometry(cfg: StreamConfig, n_samples: int,
                    sample_rate: int) -> StreamGeometry:
    spf = sample_rate * cfg.resolution
    if abs(spf - round(spf)) > 1e-9:
        raise EngineError(f"resolution {cfg.resolution} is not a whole number "
                          f"of samples at {sample_rate} Hz")
    if n_samples < 1:
        raise EngineError("empty audio stream")
    spf = int(round(spf))
    lc = cfg.frames("chunk")
    total = int(np.ceil(n_samples / spf - 1e-9))
    return StreamGeometry(
        chunk_frames=lc,
        right_frames=cfg.frames("right"),
        left_frames=cfg.frames("left"),
        block_frames=cfg.frames("block"),
        samples_per_frame=spf,
        total_frames=total,
        n_chunks=max(1, int(np.ceil(total / lc))),
    )


def frame_windows(source: Sequence, cfg: StreamConfig,
                  sample_rate: int) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (chunk index, block waveform of exactly block_frames frames).

    Missing left context at the start and right context past the end of the
    stream are zero-padded. The block for chunk c ends exactly at the chunk
    boundary plus the right context; no later sample is ever read.
    """
    geo = stream_geometry(cfg, len(source), sample_rate)
    n = len(source)
    for c in range(geo.n_chunks):
        end_f = (c + 1) * geo.chunk_frames + geo.right_frames
        start_f = end_f - geo.block_frames
        a = start_f * geo.samples_per_frame
        b = end_f * geo.samples_per_frame
        lo, hi = max(a, 0), min(b, n)
        mid = (np.asarray(source[lo:hi], dtype=np.float64)
               if hi > lo else np.zeros(0))
        block = np.concatenate([np.zeros(max(0, -a)), mid,
                                np.zeros(b - a - max(0, -a) - len(mid))])
        yield c, block


def chunk_slice(t_prime: int, chunk_frames: int, right_frames: int) -> slice:
    """Block-output frames belonging to the current chunk."""
    end = t_prime - right_frames
    return slice(end - chunk_frames, end if right_frames else None)


# ======================================================================
# Speaker buffer
# ======================================================================

def aggregate_embedding(pairs: list[tuple[np.ndarray, float]]) -> np.ndarray:
    """Weighted mean of (embedding, weight) pairs."""
    if not pairs:
        raise EngineError("cannot aggregate an empty embedding list")
    total = float(sum(w for _, w in pairs))
    if total <= 0:
        raise EngineError("cannot aggregate with zero total weight")
    out = np.zeros_like(pairs[0][0], dtype=np.float64)
    for emb, w in pairs:
        out += w * emb
    return out / total


@dataclass
class SpeakerBuffer:
    """Per-speaker lists of (embedding, weight), keyed by discovery label."""
    entries: dict[int, list[tuple[np.ndarray, float]]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.entries)

    def labels(self) -> list[int]:
        return sorted(self.entries)

    def next_label(self) -> int:
        return self.size + 1

    def enroll(self, emb: np.ndarray, weight: float) -> int:
        label = self.next_label()
        self.entries[label] = [(np.array(emb, dtype=np.float64), float(weight))]
        return label

    def append(self, label: int, emb: np.ndarray, weight: float) -> None:
        self.entries[label].append((np.array(emb, dtype=np.float64), float(weight)))

    def aggregate(self, label: int) -> np.ndarray:
        return aggregate_embedding(self.entries[label])

    def copy(self) -> "SpeakerBuffer":
        return SpeakerBuffer({k: [(e.copy(), w) for e, w in v]
                              for k, v in self.entries.items()})


def assemble_input_embeddings(buffer: SpeakerBuffer, e_pse: np.ndarray,
                              e_non: np.ndarray, capacity: int,
                              ) -> tuple[np.ndarray, list[int | None]]:
    """Slot 0: pseudo; slots 1..K: buffered speakers; rest: non-speech.

    Returns the (capacity, S) matrix and the slot -> label map (None for
    padding slots; slot 0 carries the provisional next label).
    """
    if buffer.size > capacity - 1:
        raise EngineError(
            f"{buffer.size} enrolled speakers exceed capacity {capacity}; "
            f"raise the model's speaker capacity")
    rows = [np.asarray(e_pse, dtype=np.float64)]
    slot_labels: list[int | None] = [buffer.next_label()]
    for label in buffer.labels():
        rows.append(buffer.aggregate(label))
        slot_labels.append(label)
    while len(rows) < capacity:
        rows.append(np.asarray(e_non, dtype=np.float64))
        slot_labels.append(None)
    return np.stack(rows), slot_labels


# ======================================================================
# Block step
# ======================================================================

def weight_W(y: np.ndarray, y_all: np.ndarray, threshold: float) -> float:
    """Soft count of a slot's speech mass outside overlapped regions.

    A frame is overlapped when at least two rows of y_all exceed the
    binarization threshold there.
    """
    active = y_all > threshold
    overlap = active.sum(axis=0) >= 2
    return float(y[~overlap].sum())


@dataclass
class StepResult:
    chunk_probs: dict[int, np.ndarray]    # label -> emitted chunk region
    new_label: int | None
    appended: dict[int, float]            # label -> weight admitted to buffer
    weights: dict[str, float]             # diagnostic W values per slot


def step(block: np.ndarray, buffer: SpeakerBuffer, model: DiarizationModel,
         cfg: StreamConfig, feat_cfg: FeatureConfig,
         enroll: bool = True, update: bool = True,
         z_out: list[np.ndarray] | None = None) -> StepResult:
    """Decode one block and apply the threshold rules to the buffer.

    Enrolled slots always emit their chunk region; the pseudo slot emits only
    when it enrolls. With enroll/update disabled the buffer is never mutated
    (frozen-buffer mode).
    """
    feats = logmel(block, feat_cfg)
    emb, slot_labels = assemble_input_embeddings(
        buffer, model.emb_pseudo.data, model.emb_nonspeech.data,
        model.cfg.capacity)
    with no_grad():
        x = model.extract_frames(Tensor(feats))
        z = model.encode(x)
        probs = model.detect(z, emb).data
        emb_out = model.represent(x, probs).data
    if z_out is not None:
        z_out.append(z.data)

    t_prime = probs.shape[-1]
    region = chunk_slice(t_prime, cfg.frames("chunk"), cfg.frames("right"))
    weights = {"pse": weight_W(probs[0], probs, cfg.binarize)}
    chunk_probs: dict[int, np.ndarray] = {}
    appended: dict[int, float] = {}
    new_label = None

    if enroll and weights["pse"] > cfg.tau_new:
        if buffer.size >= model.cfg.capacity - 1:
            raise EngineError(
                f"all {model.cfg.capacity - 1} speaker slots enrolled; "
                f"raise the model's speaker capacity")
        new_label = buffer.enroll(emb_out[0], weights["pse"])
        chunk_probs[new_label] = probs[0, region].copy()

    for n, label in enumerate(slot_labels[1:], start=1):
        if label is None:
            continue
        w_n = weight_W(probs[n], probs, cfg.binarize)
        weights[str(label)] = w_n
        chunk_probs[label] = probs[n, region].copy()
        if update and w_n > cfg.tau_update:
            buffer.append(label, emb_out[n], w_n)
            appended[label] = w_n
    return StepResult(chunk_probs=chunk_probs, new_label=new_label,
                      appended=appended, weights=weights)


# ======================================================================
# Full-stream passes
# ======================================================================

@dataclass
class DiarizationResult:
    timelines: dict[int, np.ndarray]   # label -> (n_frames,) probabilities
    resolution: float
    n_frames: int

    def binarized(self, threshold: float) -> dict[int, np.ndarray]:
        return {k: v > threshold for k, v in self.timelines.items()}


@dataclass
class BlockCache:
    """Encoder outputs plus the geometry needed to re-decode them."""
    geometry: StreamGeometry
    z_blocks: list[np.ndarray] = field(default_factory=list)


def _stitch(pieces: dict[int, list[np.ndarray]], geo: StreamGeometry,
            resolution: float) -> DiarizationResult:
    timelines = {}
    for label, parts in pieces.items():
        line = np.concatenate(parts) if parts else np.zeros(0)
        timelines[label] = line[:geo.total_frames]
    return DiarizationResult(timelines=timelines, resolution=resolution,
                             n_frames=geo.total_frames)


def run_online(source: Sequence, model: DiarizationModel, cfg: StreamConfig,
               feat_cfg: FeatureConfig,
               frozen_buffer: SpeakerBuffer | None = None,
               on_chunk: Callable[[int, dict[int, np.ndarray]], None] | None = None,
               ) -> tuple[DiarizationResult, SpeakerBuffer, BlockCache]:
    """First-pass blockwise inference over a full stream.

    With frozen_buffer given, enrollment and buffer updates are disabled and
    the provided buffer is used read-only; the emitted timelines are then
    identical to offline rescoring with the same buffer. on_chunk, when given,
    receives each chunk's emitted regions as soon as they are available.
    """
    geo = stream_geometry(cfg, len(source), feat_cfg.sample_rate)
    frozen = frozen_buffer is not None
    buffer = frozen_buffer.copy() if frozen else SpeakerBuffer()
    cache = BlockCache(geometry=geo)
    pieces: dict[int, list[np.ndarray]] = {lab: [] for lab in buffer.labels()}
    num_frames = 0
    for c, block in frame_windows(source, cfg, feat_cfg.sample_rate):
        result = step(block, buffer, model, cfg, feat_cfg,
                      enroll=not frozen, update=not frozen,
                      z_out=cache.z_blocks)
        for label, region in result.chunk_probs.items():
            if label == result.new_label:
                pieces[label] = [np.zeros(num_frames), region]
            else:
                pieces[label].append(region)
        if on_chunk is not None:
            on_chunk(c, result.chunk_probs)
        num_frames += geo.chunk_frames
    return _stitch(pieces, geo, cfg.resolution), buffer, cache


def rescore_offline(cache: BlockCache, buffer: SpeakerBuffer,
                    model: DiarizationModel,
                    cfg: StreamConfig) -> DiarizationResult:
    """Re-decode cached encoder outputs with the final speaker buffer.

    The pseudo slot stays in the input assembly (matching the training-time
    slot layout) but its output is discarded; no enrollment happens here. An
    empty buffer yields an empty result.
    """
    geo = cache.geometry
    if buffer.size == 0:
        return DiarizationResult(timelines={}, resolution=cfg.resolution,
                                 n_frames=geo.total_frames)
    if len(cache.z_blocks) != geo.n_chunks:
        raise EngineError(f"cache holds {len(cache.z_blocks)} blocks, "
                          f"geometry expects {geo.n_chunks}")
    emb, slot_labels = assemble_input_embeddings(
        buffer, model.emb_pseudo.data, model.emb_nonspeech.data,
        model.cfg.capacity)
    pieces: dict[int, list[np.ndarray]] = {lab: [] for lab in buffer.labels()}
    region = chunk_slice(model.cfg.out_frames, geo.chunk_frames,
                         geo.right_frames)
    for z in cache.z_blocks:
        with no_grad():
            probs = model.detect(Tensor(z), emb).data
        for n, label in enumerate(slot_labels):
            if n == 0 or label is None:
                continue
            pieces[label].append(probs[n, region].copy())
    return _stitch(pieces, geo, cfg.resolution)


# ======================================================================
# Threshold search
# ======================================================================

def tune_thresholds(model: DiarizationModel, mixtures: list,
                    cfg: StreamConfig, feat_cfg: FeatureConfig,
                    grid_new: Sequence[float] | None = None,
                    grid_update: Sequence[float] | None = None,
                    ) -> tuple[float, float, list[dict]]:
    """Grid-search the two admission thresholds on labelled recordings.

    Scores pooled offline DER; ties prefer the larger tau_new (fewer spurious
    enrollments). Returns (tau_new, tau_update, per-point report).
    """
    from .scoring import der_counts
    import dataclasses

    if grid_new is None:
        grid_new = [float(v) for v in range(10, 101, 10)]
    if grid_update is None:
        grid_update = [float(v) for v in range(10, 101, 10)]
    if not grid_new or not grid_update:
        raise EngineError("threshold grids must be non-empty")

    report = []
    best = (float("inf"), -float("inf"), -float("inf"))
    best_pair = (grid_new[0], grid_update[0])
    for t1 in grid_new:
        for t2 in grid_update:
            trial_cfg = dataclasses.replace(cfg, tau_new=t1, tau_update=t2)
            num = den = 0.0
            try:
                for mix in mixtures:
                    res, buf, cache = run_online(mix.waveform, model,
                                                 trial_cfg, feat_cfg)
                    off = rescore_offline(cache, buf, model, trial_cfg)
                    counts = der_counts(mix.refs, off.binarized(cfg.binarize),
                                        n_frames=res.n_frames)
                    num += counts.miss + counts.false_alarm + counts.confusion
                    den += counts.total_ref
                der = num / max(den, 1.0)
            except EngineError:
                der = float("inf")
            report.append({"tau_new": t1, "tau_update": t2, "der": der})
            key = (der, -t1, -t2)
            if key < best:
                best = key
                best_pair = (t1, t2)
    return best_pair[0], best_pair[1], report
