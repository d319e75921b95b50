"""WAV input/output: 16-bit PCM mono RIFF, plus raw PCM from a byte stream."""
from __future__ import annotations

import wave
from pathlib import Path

import numpy as np


class AudioError(ValueError):
    """Raised for unsupported or malformed audio inputs."""


def write_wav(path: str | Path, waveform: np.ndarray, sample_rate: int) -> None:
    """Write a float waveform in [-1, 1] as 16-bit PCM mono.

    Values outside [-1, 1] are clipped before quantization.
    """
    if waveform.ndim != 1:
        raise AudioError(f"expected a mono waveform, got shape {waveform.shape}")
    clipped = np.clip(waveform, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono WAV into float64 in [-1, 1]."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise AudioError(f"{path}: only mono WAV is supported")
        if fh.getsampwidth() != 2:
            raise AudioError(f"{path}: only 16-bit PCM is supported")
        sample_rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return pcm_to_float(raw), sample_rate


def pcm_to_float(raw: bytes) -> np.ndarray:
    """Decode little-endian signed 16-bit PCM bytes to float64 in [-1, 1]."""
    if len(raw) % 2 != 0:
        raise AudioError("raw PCM byte count must be even (16-bit samples)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32767.0
