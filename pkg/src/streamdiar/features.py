"""Log-mel filterbank features: framing, mel projection, per-block normalization."""
from __future__ import annotations

import numpy as np

from .config import FeatureConfig

_LOG_GUARD = 1e-12


class FeatureError(ValueError):
    """Raised for inputs the feature frontend cannot process."""


def mel_scale(freq_hz: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_inverse(mel: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft // 2 + 1)."""
    mel_points = np.linspace(mel_scale(fmin), mel_scale(fmax), n_mels + 2)
    hz_points = mel_inverse(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fbank = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - left) / max(center - left, 1e-9)
        down = (right - bin_freqs) / max(right - center, 1e-9)
        fbank[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fbank


def frame_signal(waveform: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Left-aligned frames starting at t*hop; the tail is zero-padded.

    Frame count is ceil(len / hop), so prepending exactly one hop of samples
    shifts frame contents by one index.
    """
    n = len(waveform)
    n_frames = int(np.ceil(n / hop))
    padded = np.zeros((n_frames - 1) * hop + frame_len)
    padded[:n] = waveform
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def logmel(waveform: np.ndarray, cfg: FeatureConfig | None = None,
           normalize: bool | None = None) -> np.ndarray:
    """Log-mel features, shape (T, n_mels) with T = ceil(len / hop).

    With normalization on (the default from cfg), the whole block is shifted
    and scaled to mean 0 and standard deviation 1.
    """
    cfg = cfg or FeatureConfig()
    if normalize is None:
        normalize = cfg.normalize
    frame_len = int(round(cfg.frame_len * cfg.sample_rate))
    hop = int(round(cfg.frame_shift * cfg.sample_rate))
    if len(waveform) < frame_len:
        raise FeatureError(
            f"waveform of {len(waveform)} samples is shorter than one frame ({frame_len})")
    n_fft = 1
    while n_fft < frame_len:
        n_fft *= 2
    frames = frame_signal(np.asarray(waveform, dtype=np.float64), frame_len, hop)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len)
    spectrum = np.fft.rfft(frames * window, n=n_fft, axis=1)
    power = np.abs(spectrum) ** 2
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2.0
    fbank = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate, cfg.fmin, fmax)
    feats = np.log(np.maximum(power @ fbank.T, _LOG_GUARD))
    if normalize:
        mean = feats.mean()
        std = feats.std()
        feats = (feats - mean) / std if std > 1e-12 else feats - mean
    return feats
