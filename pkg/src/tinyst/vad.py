"""Energy-based voice activity detection and segment slicing.

Stands in for an off-the-shelf diarization tool: frame RMS energy with an
adaptive threshold, hangover merging of short gaps, and a hard minimum
segment duration of one second.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .features import Waveform


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    utterance_id: str = ""

    def __post_init__(self):
        if not (0.0 <= self.start < self.end):
            raise ValueError(f"invalid segment bounds [{self.start}, {self.end}]")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class VadConfig:
    window_s: float = 0.025
    hop_s: float = 0.010
    energy_floor: float = 1e-3      # absolute RMS floor; digital silence stays silent
    median_factor: float = 3.0      # threshold = max(floor, factor * median RMS)
    hangover_s: float = 0.2         # gaps shorter than this merge into one segment
    min_duration_s: float = 1.0     # segments shorter than one second are dropped


def frame_rms(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    """RMS energy per frame via cumulative sums; empty if signal < one window."""
    if len(samples) < win:
        return np.zeros(0)
    csum = np.concatenate([[0.0], np.cumsum(samples.astype(np.float64) ** 2)])
    n_frames = (len(samples) - win) // hop + 1
    starts = np.arange(n_frames) * hop
    energy = csum[starts + win] - csum[starts]
    return np.sqrt(energy / win)


def detect_segments(wave_in: Waveform, cfg: VadConfig | None = None,
                    recording_id: str = "rec") -> list[Segment]:
    """Detect speech segments, sorted and non-overlapping, each >= 1 s."""
    cfg = cfg or VadConfig()
    sr = wave_in.sample_rate
    win = int(round(cfg.window_s * sr))
    hop = int(round(cfg.hop_s * sr))
    rms = frame_rms(wave_in.samples, win, hop)
    if rms.size == 0:
        return []

    threshold = max(cfg.energy_floor, cfg.median_factor * float(np.median(rms)))
    active = rms > threshold
    if not active.any():
        return []

    # frame runs -> (start_frame, end_frame_exclusive)
    edges = np.flatnonzero(np.diff(np.concatenate([[0], active.view(np.int8), [0]])))
    runs = list(zip(edges[0::2], edges[1::2]))

    # hangover: merge runs separated by short gaps
    merged = [list(runs[0])]
    max_gap_frames = int(round(cfg.hangover_s / cfg.hop_s))
    for s, e in runs[1:]:
        if s - merged[-1][1] < max_gap_frames:
            merged[-1][1] = e
        else:
            merged.append([s, e])

    duration = wave_in.duration
    segments = []
    for s, e in merged:
        start = s * cfg.hop_s
        end = min((e - 1) * cfg.hop_s + cfg.window_s, duration)
        if end - start >= cfg.min_duration_s:
            segments.append(Segment(start, end, f"{recording_id}_{len(segments):04d}"))
    return segments


def slice_segment(wave_in: Waveform, seg: Segment) -> Waveform:
    """Sample-exact sub-waveform [round(start*sr), round(end*sr))."""
    sr = wave_in.sample_rate
    lo = int(round(seg.start * sr))
    hi = int(round(seg.end * sr))
    if lo < 0 or hi > len(wave_in.samples) or lo >= hi:
        raise ValueError(
            f"segment [{seg.start}, {seg.end}] s out of range for a "
            f"{wave_in.duration:.3f} s waveform"
        )
    return Waveform(wave_in.samples[lo:hi].copy(), sr)


def segments_to_jsonl(segments: list[Segment], recording_id: str) -> str:
    """One JSON record per segment: {recording_id, start_s, end_s, utterance_id}."""
    lines = []
    for seg in segments:
        lines.append(json.dumps({
            "recording_id": recording_id,
            "start_s": round(seg.start, 6),
            "end_s": round(seg.end, 6),
            "utterance_id": seg.utterance_id,
        }))
    return "\n".join(lines) + ("\n" if lines else "")
