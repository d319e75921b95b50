"""RTTM segment files: the diarization interchange format.

One line per segment:
``SPEAKER <file> 1 <onset> <duration> <NA> <NA> <speaker> <NA> <NA>``
with onset and duration printed to 3 decimals. Lines starting with ``#`` are
treated as comments so headers can ride along with the segments.
"""
from __future__ import annotations

from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .scoring import Annotation, frames_to_annotation


class RttmError(ValueError):
    """Raised for malformed RTTM content (reports the line number)."""


def format_rttm_line(file_id: str, label: str, onset: float,
                     duration: float) -> str:
    return (f"SPEAKER {file_id} 1 {onset:.3f} {duration:.3f} "
            f"<NA> <NA> {label} <NA> <NA>")


def write_rttm(target: IO[str] | str | Path, annotation: Annotation,
               file_id: str = "rec") -> None:
    """Write segments sorted by onset, then label (deterministic output)."""
    lines = [format_rttm_line(file_id, label, onset, duration)
             for label, onset, duration in
             sorted(annotation, key=lambda s: (s[1], s[0], s[2]))]
    text = "".join(line + "\n" for line in lines)
    if isinstance(target, (str, Path)):
        Path(target).write_text(text)
    else:
        target.write(text)


def read_rttm(source: IO[str] | str | Path | Iterable[str],
              ) -> dict[str, Annotation]:
    """Parse RTTM into {file id: segment list}; errors carry line numbers."""
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text().splitlines()
    elif hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        lines = [str(line).rstrip("\n") for line in source]
    out: dict[str, Annotation] = {}
    for i, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 10 or fields[0] != "SPEAKER":
            raise RttmError(f"line {i}: expected 10-field SPEAKER record, "
                            f"got {stripped!r}")
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError as exc:
            raise RttmError(f"line {i}: bad onset/duration: {exc}") from exc
        if onset < 0 or duration <= 0:
            raise RttmError(f"line {i}: need onset >= 0 and duration > 0")
        out.setdefault(fields[1], []).append((fields[7], onset, duration))
    return out


def result_to_annotation(timelines: dict, resolution: float,
                         threshold: float = 0.5,
                         label_prefix: str = "spk") -> Annotation:
    """Binarize probability timelines and merge runs into segments."""
    frames = {}
    for label, row in timelines.items():
        row = np.asarray(row, dtype=np.float64)
        frames[f"{label_prefix}{label}"] = row > threshold
    return sorted(frames_to_annotation(frames, resolution),
                  key=lambda s: (s[1], s[0], s[2]))


def speech_mask_from_annotation(annotation: Annotation, resolution: float,
                                n_frames: int) -> np.ndarray:
    """Union of all segments as a frame mask (for oracle-VAD revision)."""
    mask = np.zeros(n_frames, dtype=bool)
    for _, onset, duration in annotation:
        a = int(np.floor(onset / resolution + 1e-9))
        b = int(np.ceil((onset + duration) / resolution - 1e-9))
        mask[max(a, 0):min(b, n_frames)] = True
    return mask
