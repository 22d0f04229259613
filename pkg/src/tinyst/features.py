"""Acoustic front end: WAV I/O, log-Mel filterbank features, CMVN, SpecAugment.

Feature math runs in float64 so per-channel statistics hold to tight
tolerances; training casts to float32 at batch assembly.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-10       # added to mel energies before log; keeps silence finite
VARIANCE_FLOOR = 1e-8   # CMVN denominator floor for constant channels


@dataclass
class Waveform:
    """Mono audio, amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-d, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    window_s: float = 0.025
    hop_s: float = 0.010
    n_fft: int = 512
    n_mels: int = 80
    fmin: float = 20.0
    fmax: float | None = None  # defaults to Nyquist

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_s * self.sample_rate))


@dataclass
class FeatureMatrix:
    """Per-utterance time x channel feature matrix."""

    frames: np.ndarray  # (T, C)
    frame_shift: float = 0.010
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"feature matrix must be (T>=1, C), got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"non-finite features in utterance {self.utterance_id!r}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_channels(self) -> int:
        return self.frames.shape[1]


@dataclass
class SpecAugmentConfig:
    num_freq_masks: int = 2
    max_freq_width: int = 27
    num_time_masks: int = 2
    max_time_width: int = 40
    seed: int = 0


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular mel filters evaluated at rfft bin centers, shape (n_bins, n_mels)."""
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)

    fb = np.zeros((len(bin_freqs), cfg.n_mels))
    for i in range(cfg.n_mels):
        left, center, right = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_freqs - left) / max(center - left, 1e-12)
        down = (right - bin_freqs) / max(right - center, 1e-12)
        fb[:, i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_filter_centers(cfg: FeatureConfig) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def logmel(wave_in: Waveform, cfg: FeatureConfig | None = None,
           utterance_id: str = "") -> FeatureMatrix:
    """80-dim log mel-filterbank features, 25 ms Hann window / 10 ms hop."""
    cfg = cfg or FeatureConfig()
    if wave_in.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"sample rate mismatch: waveform {wave_in.sample_rate} Hz vs config {cfg.sample_rate} Hz"
        )
    win = cfg.window_samples
    hop = cfg.hop_samples
    x = wave_in.samples
    if len(x) < win:
        raise ValueError(
            f"utterance shorter than one frame: {len(x)} samples < window {win}"
        )
    n_frames = (len(x) - win) // hop + 1
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    frames = x[idx] * np.hanning(win)
    spec = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    mel = spec @ mel_filterbank(cfg)
    feat = np.log(mel + LOG_FLOOR)
    return FeatureMatrix(feat, frame_shift=cfg.hop_s, utterance_id=utterance_id)


def cmvn(feat: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance, per-channel mean/variance normalization."""
    x = feat.frames
    mean = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    out = (x - mean) / np.sqrt(var + VARIANCE_FLOOR)
    return FeatureMatrix(out, frame_shift=feat.frame_shift, utterance_id=feat.utterance_id)


def spec_augment(feat: FeatureMatrix, cfg: SpecAugmentConfig) -> FeatureMatrix:
    """Zero out random frequency and time bands; deterministic given cfg.seed.

    Mask fill value 0 is the per-channel mean after CMVN, so augmentation is
    applied to normalized features.
    """
    t, c = feat.frames.shape
    max_f = min(cfg.max_freq_width, c)
    max_t = min(cfg.max_time_width, t)
    if cfg.max_freq_width < 0 or cfg.max_time_width < 0:
        raise ValueError("mask widths must be non-negative")
    out = feat.frames.copy()
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.num_freq_masks):
        w = int(rng.integers(0, max_f, endpoint=True))
        start = int(rng.integers(0, c - w, endpoint=True))
        out[:, start:start + w] = 0.0
    for _ in range(cfg.num_time_masks):
        w = int(rng.integers(0, max_t, endpoint=True))
        start = int(rng.integers(0, t - w, endpoint=True))
        out[start:start + w, :] = 0.0
    return FeatureMatrix(out, frame_shift=feat.frame_shift, utterance_id=feat.utterance_id)


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM little-endian WAV file."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(
                f"{path}: expected mono audio, got {w.getnchannels()} channels"
            )
        if w.getsampwidth() != 2:
            raise ValueError(
                f"{path}: expected 16-bit PCM, got sample width {w.getsampwidth()} bytes"
            )
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wave_out: Waveform) -> None:
    """Write mono 16-bit PCM WAV."""
    scaled = np.clip(wave_out.samples, -1.0, 1.0 - 1.0 / 32768.0)
    pcm = np.round(scaled * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave_out.sample_rate)
        w.writeframes(pcm.tobytes())
