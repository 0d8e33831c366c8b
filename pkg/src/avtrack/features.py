"""Acoustic features and audio/video time alignment.

16 kHz audio -> 25 ms Hann frames every 10 ms -> 80 log-mel energies ->
three consecutive frames folded into one 240-dim vector every 30 ms.
Video frames are mapped onto that 100/3 Hz grid by nearest-neighbour lookup.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

SAMPLE_RATE = 16000
WINDOW = 400
HOP = 160
N_FFT = 512
N_MELS = 80
STACK = 3
ACOUSTIC_DIM = N_MELS * STACK
A_FPS = Fraction(SAMPLE_RATE, HOP * STACK)  # 100/3 Hz


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = N_MELS
    fmin: float = 125.0
    fmax: float = 7500.0
    n_fft: int = N_FFT
    log_floor: float = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)


@dataclass
class VideoTrack:
    frames: np.ndarray  # [F, H, W, 3], values in [-1, 1]
    fps: float

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")


def hann_window(n: int = WINDOW) -> np.ndarray:
    """Periodic Hann window, ``0.5 - 0.5 cos(2 pi i / n)``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(wave_: Waveform | np.ndarray) -> np.ndarray:
    samples = wave_.samples if isinstance(wave_, Waveform) else np.asarray(wave_, dtype=np.float64)
    L = samples.shape[0]
    if L < WINDOW:
        raise ValueError(f"signal has {L} samples, need at least one {WINDOW}-sample window")
    n = 1 + (L - WINDOW) // HOP
    idx = np.arange(WINDOW)[None, :] + HOP * np.arange(n)[:, None]
    return samples[idx] * hann_window()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig = MelConfig(), sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters ``[n_fft//2 + 1, n_mels]``, equally spaced in mel.

    Filter ``j`` rises from edge ``j`` to peak ``j+1`` and falls to ``j+2``,
    where the ``n_mels + 2`` edges split ``[fmin, fmax]`` evenly in mel.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    f = freqs[:, None]
    up = (f - lo) / (mid - lo)
    down = (hi - f) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def filter_centers(cfg: MelConfig = MelConfig()) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))[1:-1]


def log_mel(frames: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if not np.all(np.isfinite(frames)):
        raise ValueError("log_mel: frames must be finite")
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=-1)) ** 2
    energies = power @ mel_filterbank(cfg)
    return np.log(np.maximum(energies, cfg.log_floor))


def stack3(feats: np.ndarray) -> np.ndarray:
    T = feats.shape[0]
    if T < STACK:
        raise ValueError(f"stack3 needs at least {STACK} frames, got {T}")
    n = T // STACK
    return feats[:n * STACK].reshape(n, STACK * feats.shape[1])


def acoustic_features(wave_: Waveform | np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Waveform -> ``[T, 240]`` stacked log-mel features."""
    return stack3(log_mel(frame_signal(wave_), cfg))


def n_acoustic_steps(n_samples: int) -> int:
    return (1 + (n_samples - WINDOW) // HOP) // STACK


# ---------------------------------------------------------------------------
# synchronisation


def as_rate(r) -> Fraction:
    """Exact rate.  Floats are snapped with ``limit_denominator(10**6)``,
    so ``100/3`` and ``29.97`` come out as 100/3 and 2997/100."""
    if isinstance(r, Fraction):
        return r
    if isinstance(r, int):
        return Fraction(r)
    if isinstance(r, str):
        return Fraction(r)
    return Fraction(float(r)).limit_denominator(10 ** 6)


def sync_index(i_a: int, v_fps, a_fps=A_FPS, n_frames: int | None = None) -> int:
    """1-based video frame closest to 1-based acoustic step ``i_a``.

    ``round(i_a * v_fps / a_fps)`` with halves rounded up, clamped to
    ``[1, n_frames]`` (or ``>= 1`` when ``n_frames`` is None).
    """
    ratio = as_rate(v_fps) / as_rate(a_fps)
    if ratio <= 0:
        raise ValueError("frame rates must be positive")
    p = i_a * ratio.numerator
    q = ratio.denominator
    idx = (2 * p + q) // (2 * q)
    idx = max(idx, 1)
    if n_frames is not None:
        idx = min(idx, n_frames)
    return idx


def sync_indices(T: int, v_fps, a_fps, n_frames: int) -> np.ndarray:
    """0-based frame index for each of ``T`` acoustic steps."""
    return np.array([sync_index(i, v_fps, a_fps, n_frames) - 1 for i in range(1, T + 1)], dtype=np.int64)


def resample_track(track: VideoTrack, T: int, a_fps=A_FPS) -> np.ndarray:
    F = track.frames.shape[0]
    if F == 0:
        raise ValueError("resample_track: empty track")
    return track.frames[sync_indices(T, track.fps, a_fps, F)]


# ---------------------------------------------------------------------------
# WAV input


def read_wav(path) -> Waveform:
    """Mono 16-bit PCM WAV at 16 kHz."""
    try:
        w = wave.open(str(path), "rb")
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: not a readable WAV file ({exc or 'truncated'})") from exc
    with w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM, got {w.getnchannels()} channels, "
                             f"{8 * w.getsampwidth()}-bit")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wave_: Waveform):
    pcm = np.clip(np.round(wave_.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave_.sample_rate)
        w.writeframes(pcm.tobytes())


def seconds_to_steps(seconds: float) -> int:
    return n_acoustic_steps(int(round(seconds * SAMPLE_RATE)))


__all__ = [
    "A_FPS", "ACOUSTIC_DIM", "MelConfig", "Waveform", "VideoTrack", "frame_signal", "log_mel",
    "stack3", "acoustic_features", "sync_index", "sync_indices", "resample_track", "read_wav",
    "write_wav", "mel_filterbank", "filter_centers", "hann_window", "n_acoustic_steps",
]
