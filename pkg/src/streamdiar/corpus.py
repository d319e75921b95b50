"""Synthetic multi-speaker corpus: voices, utterances, and mixtures.

Speakers are resonance-filtered harmonic sources. Each speaker's identity is a
fixed set of 3-4 bandpass resonances plus a pitch range, so the long-term
spectrum is speaker-discriminative while every call still produces a fresh
waveform. Utterances alternate speech and silence segments; mixtures sum one
utterance per speaker on a shared timeline and carry the per-speaker activity
references used for training and scoring.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal as sps

from . import rng as rngmod

# Mixture protocol defaults. Budget fractions are the per-speaker share of the
# timeline covered by speech, drawn per utterance; the 3-speaker range is lower
# so pooled overlap statistics land on the calibrated targets.
DEFAULT_COUNT_WEIGHTS = (0.40, 0.30, 0.30)
DEFAULT_BUDGET_FRAC = ((0.36, 0.60), (0.36, 0.60), (0.24, 0.46))
DEFAULT_SEG_MAX = 4.0
DEFAULT_RESOLUTION = 0.010
DEFAULT_SAMPLE_RATE = 16000

_FADE_SEC = 0.005
_PEAK = 0.95


class CorpusError(ValueError):
    """Raised for invalid corpus-simulation requests."""


# ======================================================================
# Speakers
# ======================================================================

@dataclass(frozen=True)
class SyntheticSpeaker:
    """A voice identity: pitch plus a bank of spectral resonances."""
    global_id: int
    pitch: float                       # base fundamental frequency, Hz
    resonances: tuple[tuple[float, float, float], ...]  # (center Hz, bandwidth Hz, gain)
    seed: int                          # root for per-call waveform variation

    @property
    def spectral_profile(self) -> np.ndarray:
        """Stable descriptor of the voice: pitch and resonance parameters."""
        flat = [self.pitch]
        for fc, bw, gain in self.resonances:
            flat.extend((fc, bw, gain))
        return np.asarray(flat, dtype=np.float64)


def _draw_centers(rng: np.random.Generator, k: int) -> np.ndarray:
    """Draw k resonance centers in log space with a minimum spacing ratio."""
    lo, hi = np.log(300.0), np.log(3600.0)
    for _ in range(100):
        centers = np.sort(np.exp(rng.uniform(lo, hi, size=k)))
        if np.all(centers[1:] / centers[:-1] >= 1.3):
            return centers
    return centers


def gen_corpus(n_speakers: int, seed: int, id_offset: int = 0) -> list[SyntheticSpeaker]:
    """Generate n_speakers distinct voices, deterministic in (seed, id_offset)."""
    if n_speakers < 1:
        raise CorpusError("n_speakers must be >= 1")
    speakers = []
    for i in range(n_speakers):
        gid = id_offset + i
        rng = rngmod.stream(seed, "speaker", gid)
        k = 3 + int(rng.random() < 0.5)
        centers = _draw_centers(rng, k)
        resonances = tuple(
            (float(fc), float(rng.uniform(60.0, 220.0)), float(rng.uniform(0.6, 1.0)))
            for fc in centers
        )
        pitch = float(rng.uniform(85.0, 280.0))
        speakers.append(SyntheticSpeaker(
            global_id=gid, pitch=pitch, resonances=resonances,
            seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return speakers


def synth_speech(speaker: SyntheticSpeaker, duration: float,
                 rng: np.random.Generator,
                 sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Synthesize `duration` seconds of continuous speech-like audio.

    A sawtooth source with slow pitch movement and breath noise is passed
    through the speaker's resonance bank. Each call draws fresh pitch movement
    and noise, so repeated calls differ while the long-term spectrum stays
    concentrated near the speaker's resonances.
    """
    n = int(round(duration * sample_rate))
    if n <= 0:
        raise CorpusError(f"cannot synthesize {duration} s of audio")
    t = np.arange(n) / sample_rate
    # Slow random pitch contour: vibrato plus a few interpolated drift knots.
    vib_rate = rng.uniform(4.0, 7.0)
    vib_phase = rng.uniform(0.0, 2.0 * np.pi)
    n_knots = max(2, int(duration * 2) + 1)
    knots = rng.uniform(-1.0, 1.0, size=n_knots)
    drift = np.interp(t, np.linspace(0.0, duration, n_knots), knots)
    f0 = speaker.pitch * (1.0 + 0.04 * np.sin(2.0 * np.pi * vib_rate * t + vib_phase)
                          + 0.03 * drift)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    source = sps.sawtooth(phase) + 0.05 * rng.standard_normal(n)
    out = np.zeros(n)
    for fc, bw, gain in speaker.resonances:
        b, a = sps.iirpeak(fc, Q=fc / bw, fs=sample_rate)
        out += gain * sps.lfilter(b, a, source)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= _PEAK / peak
    fade = min(n // 2, int(_FADE_SEC * sample_rate))
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        out[:fade] *= ramp
        out[-fade:] *= ramp[::-1]
    return out


# ======================================================================
# Activity timelines
# ======================================================================

def segment_walk(rng: np.random.Generator, total_len: float,
                 seg_max: float = DEFAULT_SEG_MAX,
                 speech_budget: float | None = None,
                 offset: float = 0.0) -> list[tuple[float, float]]:
    """Alternate speech/silence segments and return the speech intervals.

    Segment lengths are Uniform(0, seg_max); whether speech or silence comes
    first is a fair coin. With a speech_budget, speech segments are capped by
    the remaining budget and the walk stops once it is spent. The walk is
    truncated at total_len.
    """
    segments: list[tuple[float, float]] = []
    t = float(offset)
    budget = speech_budget
    speech_turn = bool(rng.random() < 0.5)
    while t < total_len and (budget is None or budget > 1e-12):
        seg = float(rng.uniform(0.0, seg_max))
        if speech_turn:
            if budget is not None:
                seg = min(seg, budget)
                budget -= seg
            end = min(t + seg, total_len)
            if end > t:
                segments.append((t, end))
        t += seg
        speech_turn = not speech_turn
    return segments


def activity_from_segments(segments: list[tuple[float, float]], n_frames: int,
                           resolution: float = DEFAULT_RESOLUTION) -> np.ndarray:
    """Frame f is active iff [f*res, (f+1)*res) overlaps a speech segment."""
    act = np.zeros(n_frames, dtype=bool)
    for start, end in segments:
        if end <= start:
            continue
        a = int(np.floor(start / resolution))
        b = int(np.ceil(end / resolution))
        if b > a:
            act[max(a, 0):min(b, n_frames)] = True
    return act


def n_activity_frames(duration: float, resolution: float = DEFAULT_RESOLUTION) -> int:
    """Frame count of an activity timeline: floor(duration / resolution)."""
    return int(np.floor(duration / resolution + 1e-9))


@dataclass
class Utterance:
    waveform: np.ndarray
    activity: np.ndarray
    speaker: SyntheticSpeaker
    sample_rate: int


def build_utterance(speaker: SyntheticSpeaker, total_len: float,
                    rng: np.random.Generator,
                    sample_rate: int = DEFAULT_SAMPLE_RATE,
                    resolution: float = DEFAULT_RESOLUTION,
                    seg_max: float = DEFAULT_SEG_MAX,
                    segments: list[tuple[float, float]] | None = None) -> Utterance:
    """One speaker's utterance: alternating speech/silence over total_len.

    Without explicit segments the symmetric walk is used, whose expected
    speech fraction is 0.5. Activity is 1 exactly on frames overlapping the
    generated speech segments.
    """
    if total_len <= 0:
        raise CorpusError("total_len must be positive")
    if segments is None:
        segments = segment_walk(rng, total_len, seg_max=seg_max)
    n_samples = int(round(total_len * sample_rate))
    waveform = np.zeros(n_samples)
    for start, end in segments:
        a = int(round(start * sample_rate))
        b = min(int(round(end * sample_rate)), n_samples)
        if b - a <= 0:
            continue
        waveform[a:b] = synth_speech(speaker, (b - a) / sample_rate, rng,
                                     sample_rate=sample_rate)
    n_frames = n_activity_frames(n_samples / sample_rate, resolution)
    activity = activity_from_segments(segments, n_frames, resolution)
    return Utterance(waveform=waveform, activity=activity, speaker=speaker,
                     sample_rate=sample_rate)


# ======================================================================
# Mixtures
# ======================================================================

@dataclass
class Mixture:
    waveform: np.ndarray
    refs: dict[int, np.ndarray]        # global_id -> activity timeline
    speakers: list[SyntheticSpeaker]
    sample_rate: int
    resolution: float

    @property
    def duration(self) -> float:
        return len(self.waveform) / self.sample_rate


def draw_speaker_count(rng: np.random.Generator,
                       weights: tuple[float, ...] = DEFAULT_COUNT_WEIGHTS) -> int:
    return int(rng.choice(np.arange(1, len(weights) + 1), p=np.asarray(weights)))


def sample_mixture_segments(n_speakers: int, total_len: float,
                            rng: np.random.Generator,
                            seg_max: float = DEFAULT_SEG_MAX,
                            budget_frac: tuple[tuple[float, float], ...] = DEFAULT_BUDGET_FRAC,
                            ) -> list[list[tuple[float, float]]]:
    """Per-speaker speech intervals for an n_speakers mixture.

    Each speaker gets a speech budget (fraction of total_len, range depending
    on the speaker count) and a random pattern offset, then walks alternating
    segments. This is the only sampling path for mixture activity, shared by
    audio simulation and timeline-only statistics.
    """
    if not 1 <= n_speakers <= len(budget_frac):
        raise CorpusError(f"speaker count {n_speakers} outside 1..{len(budget_frac)}")
    lo, hi = budget_frac[n_speakers - 1]
    all_segments = []
    for _ in range(n_speakers):
        budget = float(rng.uniform(lo, hi)) * total_len
        slack = max(0.0, total_len - 2.0 * budget)
        offset = float(rng.uniform(0.0, slack)) if slack > 0 else 0.0
        all_segments.append(segment_walk(rng, total_len, seg_max=seg_max,
                                         speech_budget=budget, offset=offset))
    return all_segments


def simulate_mixture(speakers: list[SyntheticSpeaker], block_len: float,
                     rng: np.random.Generator,
                     sample_rate: int = DEFAULT_SAMPLE_RATE,
                     resolution: float = DEFAULT_RESOLUTION,
                     seg_max: float = DEFAULT_SEG_MAX,
                     budget_frac: tuple[tuple[float, float], ...] = DEFAULT_BUDGET_FRAC,
                     synth: bool = True) -> Mixture:
    """Mix one utterance per speaker over a shared block_len timeline.

    The summed waveform is normalized to unit peak (silent mixtures stay
    zero). refs carry each speaker's activity timeline keyed by global id.
    """
    ids = [spk.global_id for spk in speakers]
    if len(set(ids)) != len(ids):
        raise CorpusError(f"duplicate speakers in mixture: {ids}")
    if not speakers:
        raise CorpusError("mixture needs at least one speaker")
    all_segments = sample_mixture_segments(len(speakers), block_len, rng,
                                           seg_max=seg_max, budget_frac=budget_frac)
    n_samples = int(round(block_len * sample_rate))
    n_frames = n_activity_frames(n_samples / sample_rate, resolution)
    waveform = np.zeros(n_samples)
    refs: dict[int, np.ndarray] = {}
    for spk, segments in zip(speakers, all_segments):
        refs[spk.global_id] = activity_from_segments(segments, n_frames, resolution)
        if synth:
            utt = build_utterance(spk, block_len, rng, sample_rate=sample_rate,
                                  resolution=resolution, segments=segments)
            waveform += utt.waveform
    peak = np.max(np.abs(waveform))
    if peak > 0:
        waveform /= peak
    return Mixture(waveform=waveform, refs=refs, speakers=list(speakers),
                   sample_rate=sample_rate, resolution=resolution)


def overlap_counts(activities: list[np.ndarray]) -> tuple[int, int]:
    """(frames with >= 2 active speakers, frames with >= 1 active speaker)."""
    stacked = np.sum([a.astype(np.int64) for a in activities], axis=0)
    return int(np.sum(stacked >= 2)), int(np.sum(stacked >= 1))


def overlap_ratio(activities: list[np.ndarray]) -> float:
    """Pooled overlap fraction of the speech frames. Errors on all-silence."""
    both, any_ = overlap_counts(activities)
    if any_ == 0:
        raise CorpusError("overlap ratio is undefined for an all-silent pool")
    return both / any_
