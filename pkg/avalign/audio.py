"""Audio value types and the shared spectral front-end.

Everything here is a pure function over immutable values:
- AudioBuffer: mono float64 samples in [-1, 1], finite, read-only
- Spectrogram: complex STFT frames (freq_bin x time_frame) plus the grid they were computed on
- STFT frames are centred (half-window zero padding); inversion is weighted overlap-add
  normalised by the per-sample window-square sum
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.interpolate import interp1d
from scipy.ndimage import median_filter
from scipy.signal import get_window, resample_poly

from avalign.errors import DegenerateWindow, EmptyAudio, InvalidAudio, MissingAudioFile, SignalError
from avalign.models import StftConfig, WindowFn

logger = logging.getLogger(__name__)

WORKING_RATE_HZ = 8000
PCM16_SCALE = 32768.0
# ~480 Hz at the default 8 kHz grid, several times a Hann main lobe
NOISE_SMOOTH_BINS = 31


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int = WORKING_RATE_HZ

    def __post_init__(self):
        data = np.array(self.samples, dtype=np.float64, copy=True)
        if data.ndim != 1:
            raise InvalidAudio(f"audio must be mono, got shape {data.shape}")
        if self.sample_rate_hz <= 0:
            raise InvalidAudio(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(data)):
            raise InvalidAudio("audio contains NaN or Inf")
        if data.size and float(np.max(np.abs(data))) > 1.0:
            raise InvalidAudio(f"amplitude {float(np.max(np.abs(data))):.6f} exceeds 1")
        data.setflags(write=False)
        object.__setattr__(self, "samples", data)

    @classmethod
    def from_unclipped(cls, samples: np.ndarray, sample_rate_hz: int = WORKING_RATE_HZ) -> "AudioBuffer":
        """Sanitise arbitrary processing output into a valid buffer"""
        data = np.nan_to_num(np.asarray(samples, dtype=np.float64), nan=0.0, posinf=1.0, neginf=-1.0)
        return cls(np.clip(data, -1.0, 1.0), sample_rate_hz)

    @property
    def n_samples(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    @property
    def rms(self) -> float:
        if self.n_samples == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))

    @property
    def peak(self) -> float:
        if self.n_samples == 0:
            return 0.0
        return float(np.max(np.abs(self.samples)))


@dataclass(frozen=True, eq=False)
class Spectrogram:
    frames: np.ndarray
    config: StftConfig
    origin_len: int
    sample_rate_hz: int = WORKING_RATE_HZ
    window: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n_fft = self.config.n_fft(self.sample_rate_hz)
        expected = (n_fft // 2 + 1, frame_count(self.origin_len, self.config, self.sample_rate_hz))
        if self.frames.shape != expected:
            raise SignalError(f"spectrogram shape {self.frames.shape} does not match grid {expected}")
        object.__setattr__(self, "window", analysis_window(self.config, self.sample_rate_hz))

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    @property
    def win_length(self) -> int:
        return self.config.win_length(self.sample_rate_hz)

    @property
    def hop_length(self) -> int:
        return self.config.hop_length(self.sample_rate_hz)

    @property
    def pad(self) -> int:
        return self.win_length // 2

    def with_frames(self, frames: np.ndarray) -> "Spectrogram":
        return Spectrogram(frames, self.config, self.origin_len, self.sample_rate_hz)

    def interior_frames(self) -> np.ndarray:
        """Indices of frames lying entirely inside the source signal"""
        starts = np.arange(self.frames.shape[1]) * self.hop_length
        inside = (starts >= self.pad) & (starts + self.win_length <= self.pad + self.origin_len)
        return np.flatnonzero(inside)


@lru_cache(maxsize=16)
def _window(kind: WindowFn, length: int) -> np.ndarray:
    match kind:
        case WindowFn.HANN:
            w = get_window("hann", length, fftbins=True).astype(np.float64)
        case WindowFn.RECT:
            w = np.ones(length, dtype=np.float64)
        case _:
            raise SignalError(f"unknown window {kind}")
    w.setflags(write=False)
    return w


def analysis_window(cfg: StftConfig, sample_rate_hz: int = WORKING_RATE_HZ) -> np.ndarray:
    return _window(cfg.window_fn, cfg.win_length(sample_rate_hz))


def frame_count(n_samples: int, cfg: StftConfig, sample_rate_hz: int = WORKING_RATE_HZ) -> int:
    win = cfg.win_length(sample_rate_hz)
    hop = cfg.hop_length(sample_rate_hz)
    pad = win // 2
    return 1 + max(0, math.ceil((n_samples + 2 * pad - win) / hop))


def compute_spectrogram(audio: AudioBuffer, cfg: StftConfig | None = None) -> Spectrogram:
    """Centred STFT of the whole buffer; frames are never padded or cut to the view size"""
    cfg = cfg or StftConfig()
    sr = audio.sample_rate_hz
    win = cfg.win_length(sr)
    hop = cfg.hop_length(sr)
    n = audio.n_samples
    if n < win:
        raise EmptyAudio(f"{n} samples is shorter than one {win}-sample window")

    pad = win // 2
    n_frames = frame_count(n, cfg, sr)
    padded = np.zeros((n_frames - 1) * hop + win)
    padded[pad : pad + n] = audio.samples
    segments = sliding_window_view(padded, win)[::hop][:n_frames]
    frames = np.fft.rfft(segments * analysis_window(cfg, sr), n=cfg.n_fft(sr), axis=1).T
    return Spectrogram(frames, cfg, n, sr)


def overlap_add(spec: Spectrogram) -> np.ndarray:
    """Weighted overlap-add of the frames, normalised by the window-square sum, unclipped"""
    win = spec.win_length
    hop = spec.hop_length
    window = spec.window
    n_frames = spec.frames.shape[1]
    segments = np.fft.irfft(spec.frames.T, n=spec.config.n_fft(spec.sample_rate_hz), axis=1)[:, :win] * window

    total = (n_frames - 1) * hop + win
    index = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    out = np.zeros(total)
    norm = np.zeros(total)
    np.add.at(out, index, segments)
    np.add.at(norm, index, np.broadcast_to(window**2, segments.shape))

    interior = slice(spec.pad, spec.pad + spec.origin_len)
    weights = norm[interior]
    if weights.size and float(weights.min()) < 1e-8:
        raise DegenerateWindow(
            f"window-square sum {float(weights.min()):.3e} below 1e-8 (window {win}, hop {hop}, {spec.config.window_fn.value})"
        )
    return out[interior] / weights


def invert_spectrogram(spec: Spectrogram) -> AudioBuffer:
    return AudioBuffer.from_unclipped(overlap_add(spec), spec.sample_rate_hz)


def log_view(spec: Spectrogram) -> np.ndarray:
    """n_freq_bins x n_time_frames log(1 + |X|) view, linearly rebinned in frequency"""
    cfg = spec.config
    rebinned = rebin_frequency(np.log1p(spec.magnitude), spec)
    view = np.zeros((cfg.n_freq_bins, cfg.n_time_frames))
    n = min(cfg.n_time_frames, rebinned.shape[1])
    view[:, :n] = rebinned[:, :n]
    return view


def rebin_frequency(values: np.ndarray, spec: Spectrogram) -> np.ndarray:
    """Linear interpolation of per-FFT-bin values onto n_freq_bins points from 0 to Nyquist"""
    sr = spec.sample_rate_hz
    source = np.fft.rfftfreq(spec.config.n_fft(sr), 1.0 / sr)
    target = np.linspace(0.0, sr / 2.0, spec.config.n_freq_bins)
    return interp1d(source, values, axis=0)(target)


def mean_log_profile(spec: Spectrogram) -> np.ndarray:
    """Time average over every frame of the rebinned log-magnitude"""
    return rebin_frequency(np.log1p(spec.magnitude), spec).mean(axis=1)


def band_frequencies(cfg: StftConfig, sample_rate_hz: int = WORKING_RATE_HZ) -> np.ndarray:
    return np.linspace(0.0, sample_rate_hz / 2.0, cfg.n_freq_bins)


def energy_envelope(audio: AudioBuffer, frame_hz: float) -> np.ndarray:
    """RMS per tick of 1/frame_hz seconds; ceil(duration * frame_hz) ticks"""
    n = audio.n_samples
    sr = audio.sample_rate_hz
    if n == 0:
        raise EmptyAudio("energy envelope of empty audio")
    if frame_hz <= 0 or frame_hz > sr:
        raise SignalError(f"frame rate {frame_hz} Hz must lie in (0, {sr}]")

    n_ticks = max(1, math.ceil(n * frame_hz / sr - 1e-9))
    edges = np.minimum(np.round(np.arange(n_ticks + 1) * sr / frame_hz).astype(np.int64), n)
    starts = np.minimum(edges[:-1], n - 1)
    ends = np.maximum(edges[1:], starts + 1)
    energy = np.concatenate(([0.0], np.cumsum(audio.samples**2)))
    mean_square = (energy[ends] - energy[starts]) / (ends - starts)
    return np.sqrt(np.maximum(mean_square, 0.0))


def estimate_noise_spectrum(spec: Spectrogram, percentile: float) -> np.ndarray:
    """Per-bin noise magnitude floor.

    Starts from the per-bin mean over the `percentile` % lowest-energy frames, then caps each bin
    at the running median across NOISE_SMOOTH_BINS neighbouring bins: a steady tone is present in
    the quiet frames too, and only the cap keeps its peak out of the noise floor.
    Frames touching the zero padding are only used when no frame lies fully inside the signal.
    """
    magnitude = spec.magnitude
    candidates = spec.interior_frames()
    if candidates.size == 0:
        candidates = np.arange(magnitude.shape[1])
    energy = np.sum(magnitude[:, candidates] ** 2, axis=0)
    keep = max(1, math.ceil(candidates.size * percentile / 100.0))
    lowest = candidates[np.argsort(energy, kind="stable")[:keep]]
    quiet = magnitude[:, lowest].mean(axis=1)
    return np.minimum(quiet, median_filter(quiet, size=NOISE_SMOOTH_BINS, mode="nearest"))


def read_wav(path: Path, target_rate_hz: int = WORKING_RATE_HZ) -> AudioBuffer:
    """Load a WAV as mono at the working rate.

    16-bit files are read as raw integers and scaled by 1/32768, so a later 16-bit write of
    an unedited buffer reproduces the file's samples exactly. Stereo is averaged to mono;
    other rates go through polyphase windowed-sinc resampling.
    """
    path = Path(path)
    if not path.exists():
        raise MissingAudioFile(path)
    try:
        info = sf.info(str(path))
        if info.subtype == "PCM_16":
            raw, rate = sf.read(str(path), dtype="int16", always_2d=True)
            data = raw.astype(np.float64) / PCM16_SCALE
        else:
            data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except RuntimeError as e:
        logger.error(f"Error reading audio {path}: {e}")
        raise InvalidAudio(f"unreadable audio file {path}: {e}") from e

    mono = data.mean(axis=1) if data.shape[1] > 1 else data[:, 0]
    if rate != target_rate_hz:
        g = gcd(int(rate), int(target_rate_hz))
        mono = resample_poly(mono, target_rate_hz // g, int(rate) // g)
        logger.debug(f"Resampled {path} from {rate} Hz to {target_rate_hz} Hz")
    return AudioBuffer.from_unclipped(mono, target_rate_hz)


def to_pcm16(audio: AudioBuffer) -> np.ndarray:
    return np.clip(np.round(audio.samples * PCM16_SCALE), -32768, 32767).astype(np.int16)


def write_wav(audio: AudioBuffer, path: Path, subtype: str = "PCM_16") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    match subtype:
        case "PCM_16":
            sf.write(str(path), to_pcm16(audio), audio.sample_rate_hz, subtype="PCM_16")
        case "FLOAT":
            sf.write(str(path), audio.samples.astype(np.float32), audio.sample_rate_hz, subtype="FLOAT")
        case _:
            raise SignalError(f"unsupported WAV subtype {subtype}")
    return path
