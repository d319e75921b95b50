"""Diarization scoring: collar-free DER, oracle-VAD revision, count accuracy.

Scoring is frame-discretized at the engine resolution. The speaker mapping is
the one-to-one assignment maximizing reference/hypothesis co-occurrence, found
with the Hungarian method; a brute-force bijection search over small instances
is kept alongside as an independent check.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

# (speaker label, onset seconds, duration seconds) triples
Annotation = list[tuple[str, float, float]]


class ScoringError(ValueError):
    """Raised for unscorable inputs (empty reference, length mismatch)."""


# ======================================================================
# Annotation <-> frame grids
# ======================================================================

def annotation_to_frames(annotation: Annotation, resolution: float,
                         n_frames: int | None = None,
                         ) -> tuple[dict[str, np.ndarray], int]:
    """Rasterize segments onto the frame grid.

    A frame is active iff its [f*res, (f+1)*res) span overlaps a segment.
    Without an explicit n_frames the grid extends to the last segment end.
    """
    for label, onset, duration in annotation:
        if not label:
            raise ScoringError("empty speaker label")
        if duration <= 0:
            raise ScoringError(f"non-positive duration for {label!r}")
    if n_frames is None:
        end = max((onset + dur for _, onset, dur in annotation), default=0.0)
        n_frames = int(np.ceil(end / resolution - 1e-9))
    frames: dict[str, np.ndarray] = {}
    for label, onset, duration in annotation:
        row = frames.setdefault(label, np.zeros(n_frames, dtype=bool))
        a = int(np.floor(onset / resolution + 1e-9))
        b = int(np.ceil((onset + duration) / resolution - 1e-9))
        row[max(a, 0):min(b, n_frames)] = True
    return frames, n_frames


def frames_to_annotation(frames: dict, resolution: float) -> Annotation:
    """Contiguous active runs back to (label, onset, duration) triples."""
    out: Annotation = []
    for label, row in frames.items():
        row = np.asarray(row, dtype=bool)
        padded = np.concatenate([[False], row, [False]]).astype(np.int8)
        edges = np.diff(padded)
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1)
        for a, b in zip(starts, ends):
            out.append((str(label), a * resolution, (b - a) * resolution))
    return out


# ======================================================================
# DER
# ======================================================================

@dataclass
class DerCounts:
    miss: float
    false_alarm: float
    confusion: float
    total_ref: float
    mapping: dict           # hypothesis label -> reference label


@dataclass
class DerReport:
    der: float
    miss: float
    false_alarm: float
    confusion: float
    mapping: dict


def _stack(frames: dict, n_frames: int) -> tuple[list, np.ndarray]:
    labels = list(frames.keys())
    if not labels:
        return labels, np.zeros((0, n_frames), dtype=bool)
    mat = np.stack([np.asarray(frames[k], dtype=bool) for k in labels])
    if mat.shape[1] != n_frames:
        raise ScoringError(f"timeline length {mat.shape[1]} != grid {n_frames}")
    return labels, mat


def optimal_mapping(ref: dict, hyp: dict, n_frames: int) -> dict:
    """Hypothesis -> reference label assignment maximizing co-occurrence."""
    ref_labels, ref_mat = _stack(ref, n_frames)
    hyp_labels, hyp_mat = _stack(hyp, n_frames)
    if not ref_labels or not hyp_labels:
        return {}
    overlap = ref_mat.astype(np.float64) @ hyp_mat.astype(np.float64).T
    rows, cols = linear_sum_assignment(-overlap)
    return {hyp_labels[c]: ref_labels[r] for r, c in zip(rows, cols)
            if overlap[r, c] > 0}


def brute_force_mapping(ref: dict, hyp: dict, n_frames: int) -> dict:
    """Exhaustive bijection search (small instances only); same objective."""
    ref_labels, ref_mat = _stack(ref, n_frames)
    hyp_labels, hyp_mat = _stack(hyp, n_frames)
    if not ref_labels or not hyp_labels:
        return {}
    if len(ref_labels) > 6 or len(hyp_labels) > 6:
        raise ScoringError("brute-force mapping limited to 6 speakers per side")
    overlap = ref_mat.astype(np.float64) @ hyp_mat.astype(np.float64).T
    nr, nh = len(ref_labels), len(hyp_labels)
    best_score, best = -1.0, {}
    if nh <= nr:
        for perm in itertools.permutations(range(nr), nh):
            score = sum(overlap[perm[j], j] for j in range(nh))
            if score > best_score:
                best_score, best = score, {
                    hyp_labels[j]: ref_labels[perm[j]] for j in range(nh)
                    if overlap[perm[j], j] > 0}
    else:
        for perm in itertools.permutations(range(nh), nr):
            score = sum(overlap[i, perm[i]] for i in range(nr))
            if score > best_score:
                best_score, best = score, {
                    hyp_labels[perm[i]]: ref_labels[i] for i in range(nr)
                    if overlap[i, perm[i]] > 0}
    return best


def _collar_mask(ref_mat: np.ndarray, collar: float,
                 resolution: float) -> np.ndarray:
    """True on frames that count; collar widens around reference transitions."""
    n_frames = ref_mat.shape[1]
    keep = np.ones(n_frames, dtype=bool)
    if collar <= 0 or ref_mat.size == 0:
        return keep
    half = int(round(collar / resolution))
    for row in ref_mat:
        edges = np.flatnonzero(np.diff(np.concatenate([[False], row, [False]])
                                       .astype(np.int8)))
        for e in edges:
            keep[max(0, e - half):min(n_frames, e + half)] = False
    return keep


def der_counts(ref: dict, hyp: dict, n_frames: int, collar: float = 0.0,
               resolution: float = 0.010) -> DerCounts:
    """Frame-level error accounting under the optimal speaker mapping.

    Per frame with R reference speakers, H hypothesis speakers, and C mapped
    pairs active on both sides: miss max(0, R-H), false alarm max(0, H-R),
    confusion min(R, H) - C.
    """
    ref_labels, ref_mat = _stack(ref, n_frames)
    hyp_labels, hyp_mat = _stack(hyp, n_frames)
    keep = _collar_mask(ref_mat, collar, resolution)
    mapping = optimal_mapping(ref, hyp, n_frames)

    n_ref = ref_mat.sum(axis=0) if ref_labels else np.zeros(n_frames, dtype=np.int64)
    n_hyp = hyp_mat.sum(axis=0) if hyp_labels else np.zeros(n_frames, dtype=np.int64)
    n_cor = np.zeros(n_frames, dtype=np.int64)
    ref_index = {lab: i for i, lab in enumerate(ref_labels)}
    hyp_index = {lab: i for i, lab in enumerate(hyp_labels)}
    for hyp_lab, ref_lab in mapping.items():
        n_cor += ref_mat[ref_index[ref_lab]] & hyp_mat[hyp_index[hyp_lab]]

    miss = np.maximum(0, n_ref - n_hyp)[keep].sum()
    fa = np.maximum(0, n_hyp - n_ref)[keep].sum()
    conf = (np.minimum(n_ref, n_hyp) - n_cor)[keep].sum()
    total = n_ref[keep].sum()
    return DerCounts(miss=float(miss), false_alarm=float(fa),
                     confusion=float(conf), total_ref=float(total),
                     mapping=mapping)


def der(reference: Annotation, hypothesis: Annotation,
        resolution: float = 0.010, collar: float = 0.0,
        n_frames: int | None = None) -> DerReport:
    """DER with optimal mapping; components are fractions of reference speech."""
    ref, nf = annotation_to_frames(reference, resolution, n_frames)
    if n_frames is None:
        hyp_end = max((o + d for _, o, d in hypothesis), default=0.0)
        hyp_nf = int(np.ceil(hyp_end / resolution - 1e-9))
        if hyp_nf > nf:
            nf = hyp_nf
            ref, _ = annotation_to_frames(reference, resolution, nf)
    hyp, _ = annotation_to_frames(hypothesis, resolution, nf)
    counts = der_counts(ref, hyp, nf, collar=collar, resolution=resolution)
    if counts.total_ref == 0:
        raise ScoringError("DER undefined: reference contains no speech")
    d = counts.total_ref
    m, f, c = counts.miss / d, counts.false_alarm / d, counts.confusion / d
    return DerReport(der=m + f + c, miss=m, false_alarm=f, confusion=c,
                     mapping=counts.mapping)


# ======================================================================
# Oracle-VAD revision
# ======================================================================

def apply_oracle_vad(probs: dict, mask: np.ndarray,
                     threshold: float = 0.5) -> dict:
    """Clamp hypothesis activity to an oracle speech mask.

    Outside the mask all activity is cleared. Inside the mask, frames where no
    speaker clears the threshold get the highest-posterior speaker activated.
    """
    mask = np.asarray(mask, dtype=bool)
    out = {}
    for label, row in probs.items():
        row = np.asarray(row, dtype=np.float64)
        if len(row) != len(mask):
            raise ScoringError(f"timeline length {len(row)} != mask {len(mask)}")
        out[label] = (row > threshold) & mask
    if out:
        labels = list(out.keys())
        active = np.stack([out[k] for k in labels]).any(axis=0)
        silent = mask & ~active
        if silent.any():
            stack = np.stack([np.asarray(probs[k], dtype=np.float64)
                              for k in labels])
            best = np.argmax(stack, axis=0)
            for i, label in enumerate(labels):
                out[label] = out[label] | (silent & (best == i))
    return out


# ======================================================================
# Speaker counting and timing
# ======================================================================

@dataclass
class CountReport:
    matrix: np.ndarray      # [true count, predicted count] occurrences
    accuracy: float


def speaker_count_stats(pairs: list[tuple[int, int]]) -> CountReport:
    """Confusion matrix over (predicted, true) speaker counts.

    Accuracy is the fraction of recordings whose predicted count is exact.
    """
    if not pairs:
        return CountReport(matrix=np.zeros((1, 1), dtype=np.int64), accuracy=0.0)
    top = max(max(p, t) for p, t in pairs)
    matrix = np.zeros((top + 1, top + 1), dtype=np.int64)
    for pred, true in pairs:
        if pred < 0 or true < 0:
            raise ScoringError("speaker counts must be non-negative")
        matrix[true, pred] += 1
    accuracy = float(np.trace(matrix)) / len(pairs)
    return CountReport(matrix=matrix, accuracy=accuracy)


def rtf(processing_seconds: float, audio_seconds: float) -> float:
    """Real-time factor: processing time over audio time."""
    if audio_seconds <= 0:
        raise ScoringError("audio duration must be positive")
    return processing_seconds / audio_seconds
