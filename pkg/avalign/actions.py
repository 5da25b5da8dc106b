"""The eight editing actions.

Noise filters (spectral_subtraction, wiener_filter, wavelet_denoise, spectral_gate) and
coordination edits (speed_mod, pitch_mod, volume_adjust, fill_blanks). Every action is a pure
function of (audio, params, seed) and returns a valid AudioBuffer: finite, |x| <= 1, and the
input length except for speed_mod.
"""

import logging
import math

import librosa
import numpy as np
import pywt
from librosa.util.exceptions import ParameterError
from scipy.signal import resample

from avalign.audio import (
    AudioBuffer,
    Spectrogram,
    analysis_window,
    compute_spectrogram,
    energy_envelope,
    estimate_noise_spectrum,
    frame_count,
    invert_spectrogram,
    overlap_add,
)
from avalign.errors import ActionError, AvalignError, EmptyAudio, ParamOutOfRange, SilentInput, TooShort
from avalign.models import (
    ActionKind,
    ActionPlan,
    CoordParams,
    EditAction,
    FillMode,
    NoiseParams,
    StftConfig,
    ThresholdRule,
    WaveletParams,
)

logger = logging.getLogger(__name__)

BLANK_LEVEL = 1e-4
BLANK_TICK_HZ = 1000.0
FLANK_S = 0.25
CROSSFADE_S = 0.010
COMFORT_NOISE_RMS = 1e-3  # -60 dBFS


def _check_range(name: str, value: float | None, low: float, high: float) -> float:
    if value is None or not math.isfinite(value) or not low <= value <= high:
        raise ParamOutOfRange(f"{name}={value} outside [{low}, {high}]")
    return float(value)


def _require_window(audio: AudioBuffer, cfg: StftConfig) -> None:
    if audio.n_samples == 0:
        raise EmptyAudio("action applied to empty audio")
    win = cfg.win_length(audio.sample_rate_hz)
    if audio.n_samples < win:
        raise TooShort(f"{audio.n_samples} samples, filters need at least one {win}-sample window")


def _finalize(samples: np.ndarray, sample_rate_hz: int) -> AudioBuffer:
    return AudioBuffer.from_unclipped(samples, sample_rate_hz)


def _check_noise_params(p: NoiseParams) -> None:
    _check_range("noise_percentile", p.noise_percentile, 1e-12, 50.0)
    _check_range("oversubtraction", p.oversubtraction, 1.0, math.inf)
    _check_range("floor_db", p.floor_db, -math.inf, 0.0)


# Noise filtering


def spectral_subtraction(audio: AudioBuffer, p: NoiseParams, cfg: StftConfig | None = None) -> AudioBuffer:
    cfg = cfg or StftConfig()
    _check_noise_params(p)
    _require_window(audio, cfg)
    spec = compute_spectrogram(audio, cfg)
    magnitude = spec.magnitude
    noise = estimate_noise_spectrum(spec, p.noise_percentile)[:, None]
    floor = magnitude * 10 ** (p.floor_db / 20)
    cleaned = np.maximum(magnitude - p.oversubtraction * noise, floor)
    gain = np.divide(cleaned, magnitude, out=np.zeros_like(magnitude), where=magnitude > 0)
    return invert_spectrogram(spec.with_frames(spec.frames * gain))


def wiener_filter(audio: AudioBuffer, p: NoiseParams, cfg: StftConfig | None = None) -> AudioBuffer:
    cfg = cfg or StftConfig()
    _check_noise_params(p)
    _require_window(audio, cfg)
    spec = compute_spectrogram(audio, cfg)
    power = spec.magnitude**2
    noise_power = np.broadcast_to((estimate_noise_spectrum(spec, p.noise_percentile) ** 2)[:, None], power.shape)
    # bins with a zero noise estimate pass unchanged
    snr_prior = np.divide(power, noise_power, out=np.full_like(power, np.inf), where=noise_power > 0) - 1.0
    snr_prior = np.maximum(snr_prior, 0.0)
    with np.errstate(invalid="ignore"):
        gain = np.where(np.isinf(snr_prior), 1.0, snr_prior / (1.0 + snr_prior))
    gain = np.maximum(gain, 10 ** (p.floor_db / 20))
    return invert_spectrogram(spec.with_frames(spec.frames * gain))


def _sure_threshold(x: np.ndarray) -> float:
    """Soft threshold minimising Stein's unbiased risk estimate for unit-variance noise"""
    squares = np.sort(x**2)
    n = squares.size
    risks = (n - 2 * np.arange(1, n + 1) + np.cumsum(squares) + np.arange(n - 1, -1, -1) * squares) / n
    return math.sqrt(float(squares[np.argmin(risks)]))


def _band_threshold(band: np.ndarray, sigma: float, ceiling: float, rule: ThresholdRule) -> float:
    """Threshold of one detail band, in units of sigma"""
    if rule == ThresholdRule.UNIVERSAL:
        return ceiling
    x = band / sigma
    n = x.size
    excess = (float(np.dot(x, x)) - n) / n
    if excess < math.log2(n) ** 1.5 / math.sqrt(n):
        return ceiling
    # dense band: signal dominates
    return min(_sure_threshold(x), ceiling)


def wavelet_denoise(audio: AudioBuffer, p: WaveletParams) -> AudioBuffer:
    """Soft-threshold shrinkage of every detail band.

    sigma = median(|finest detail|) / 0.6745 and the universal ceiling is sqrt(2 ln n). The
    universal rule applies the ceiling everywhere; heursure keeps it for bands that look like
    noise and uses the SURE threshold (never above the ceiling) where the band carries signal.
    The final threshold is scale * sigma * band threshold.
    """
    n = audio.n_samples
    block = 2**p.levels
    if n < block:
        raise TooShort(f"{n} samples, {p.levels} wavelet levels need at least {block}")
    padded = np.zeros(math.ceil(n / block) * block)
    padded[:n] = audio.samples

    coeffs = pywt.wavedec(padded, p.wavelet.value, level=p.levels, mode="periodization")
    approx, details = coeffs[0], coeffs[1:]
    sigma = float(np.median(np.abs(details[-1]))) / 0.6745
    ceiling = math.sqrt(2.0 * math.log(padded.size))
    if p.threshold_scale > 0 and sigma > 0:
        scale = p.threshold_scale * sigma
        details = [
            pywt.threshold(d, scale * _band_threshold(d, sigma, ceiling, p.threshold_rule), mode="soft") for d in details
        ]
    rebuilt = pywt.waverec([approx, *details], p.wavelet.value, mode="periodization")
    return _finalize(rebuilt[:n], audio.sample_rate_hz)


def _smooth_gate(gate: np.ndarray, frame_s: float, attack_ms: float, release_ms: float) -> np.ndarray:
    """One-pole attack/release smoothing along time, per bin"""

    def coefficient(time_ms: float) -> float:
        return math.exp(-frame_s / (time_ms / 1000.0)) if time_ms > 0 else 0.0

    attack = coefficient(attack_ms)
    release = coefficient(release_ms)
    smoothed = np.empty_like(gate)
    state = gate[:, 0].copy()
    for t in range(gate.shape[1]):
        target = gate[:, t]
        alpha = np.where(target > state, attack, release)
        state = alpha * state + (1.0 - alpha) * target
        smoothed[:, t] = state
    return smoothed


def spectral_gate(audio: AudioBuffer, p: NoiseParams, cfg: StftConfig | None = None) -> AudioBuffer:
    cfg = cfg or StftConfig()
    _require_window(audio, cfg)
    _check_range("gate_attack_ms", p.gate_attack_ms, 0.0, math.inf)
    _check_range("gate_release_ms", p.gate_release_ms, 0.0, math.inf)
    spec = compute_spectrogram(audio, cfg)
    magnitude = spec.magnitude
    threshold = magnitude.max(axis=1, keepdims=True) * 10 ** (p.gate_threshold_db / 20)
    gate = (magnitude >= threshold).astype(np.float64)
    gain = _smooth_gate(gate, cfg.hop_ms / 1000.0, p.gate_attack_ms, p.gate_release_ms)
    return invert_spectrogram(spec.with_frames(spec.frames * gain))


# Coordination


def _time_stretch(audio: AudioBuffer, rate: float, out_len: int, cfg: StftConfig) -> np.ndarray:
    """Phase-vocoder stretch on the shared STFT grid; rate > 1 shortens"""
    sr = audio.sample_rate_hz
    spec = compute_spectrogram(audio, cfg)
    stretched = librosa.phase_vocoder(
        spec.frames, rate=rate, hop_length=cfg.hop_length(sr), n_fft=cfg.n_fft(sr)
    )
    stretched = librosa.util.fix_length(stretched, size=frame_count(out_len, cfg, sr), axis=1)
    return overlap_add(Spectrogram(stretched, cfg, out_len, sr))


def speed_mod(audio: AudioBuffer, p: CoordParams, cfg: StftConfig | None = None) -> AudioBuffer:
    """Play `speed_factor` times faster at unchanged pitch; length becomes round(n / factor)"""
    cfg = cfg or StftConfig()
    factor = _check_range("speed_factor", p.speed_factor, 0.5, 2.0)
    if factor == 1.0:
        return audio
    _require_window(audio, cfg)
    out_len = max(1, round(audio.n_samples / factor))
    return _finalize(_time_stretch(audio, factor, out_len, cfg), audio.sample_rate_hz)


def pitch_mod(audio: AudioBuffer, p: CoordParams, cfg: StftConfig | None = None) -> AudioBuffer:
    cfg = cfg or StftConfig()
    semitones = _check_range("pitch_semitones", p.pitch_semitones, -12.0, 12.0)
    if semitones == 0.0:
        return audio
    _require_window(audio, cfg)
    ratio = 2 ** (semitones / 12)
    n = audio.n_samples
    stretched = _time_stretch(audio, 1.0 / ratio, max(1, round(n * ratio)), cfg)
    return _finalize(resample(stretched, n), audio.sample_rate_hz)


def volume_adjust(audio: AudioBuffer, p: CoordParams) -> AudioBuffer:
    """Static gain or RMS targeting, then tanh on the samples that land beyond full scale"""
    if (p.gain_db is None) == (p.target_rms is None):
        raise ParamOutOfRange("volume_adjust takes exactly one of gain_db / target_rms")
    if p.gain_db is not None:
        gain_db = _check_range("gain_db", p.gain_db, -30.0, 30.0)
        if gain_db == 0.0:
            return audio
        scaled = audio.samples * 10 ** (gain_db / 20)
    else:
        target = _check_range("target_rms", p.target_rms, 1e-12, 1.0)
        if audio.rms == 0.0:
            raise SilentInput("cannot reach a target RMS from all-zero audio")
        scaled = audio.samples * (target / audio.rms)
    over = np.abs(scaled) > 1.0
    if np.any(over):
        scaled = np.where(over, np.sign(scaled) * np.tanh(np.abs(scaled)), scaled)
    return _finalize(scaled, audio.sample_rate_hz)


def find_blanks(audio: AudioBuffer, min_ms: float) -> list[tuple[int, int]]:
    """Sample ranges of maximal runs, at least `min_ms` long, of 1 ms ticks with RMS below 1e-4"""
    if audio.n_samples == 0:
        return []
    quiet = energy_envelope(audio, BLANK_TICK_HZ) < BLANK_LEVEL
    min_ticks = math.ceil(min_ms * BLANK_TICK_HZ / 1000.0)
    padded = np.concatenate(([False], quiet, [False])).astype(np.int8)
    changes = np.diff(padded)
    starts = np.flatnonzero(changes == 1)
    ends = np.flatnonzero(changes == -1)
    samples_per_tick = audio.sample_rate_hz / BLANK_TICK_HZ
    blanks = []
    for start, end in zip(starts, ends, strict=True):
        if end - start >= min_ticks:
            blanks.append((round(start * samples_per_tick), min(audio.n_samples, round(end * samples_per_tick))))
    return blanks


def _flank_magnitude(samples: np.ndarray, n_fft: int, window: np.ndarray, hop: int) -> np.ndarray | None:
    """Average magnitude spectrum of a flank, or None if the flank carries nothing"""
    win = window.size
    if samples.size == 0 or not np.any(samples):
        return None
    if samples.size < win:
        samples = np.pad(samples, (0, win - samples.size))
    segments = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop]
    return np.abs(np.fft.rfft(segments * window, n=n_fft, axis=1)).mean(axis=0)


def _context_noise(
    audio: AudioBuffer, start: int, end: int, cfg: StftConfig, rng: np.random.Generator
) -> np.ndarray | None:
    sr = audio.sample_rate_hz
    flank = round(FLANK_S * sr)
    n_fft = cfg.n_fft(sr)
    window = analysis_window(cfg, sr)
    hop = cfg.hop_length(sr)
    spectra = [
        spectrum
        for spectrum in (
            _flank_magnitude(audio.samples[max(0, start - flank) : start], n_fft, window, hop),
            _flank_magnitude(audio.samples[end : end + flank], n_fft, window, hop),
        )
        if spectrum is not None
    ]
    if not spectra:
        return None
    magnitude = np.mean(spectra, axis=0)
    length = end - start
    n_frames = frame_count(length, cfg, sr)
    phase = rng.uniform(-np.pi, np.pi, size=(magnitude.size, n_frames))
    frames = magnitude[:, None] * np.exp(1j * phase)
    return overlap_add(Spectrogram(frames, cfg, length, sr))


def fill_blanks(audio: AudioBuffer, p: CoordParams, seed: int = 0, cfg: StftConfig | None = None) -> AudioBuffer:
    """Fill silent runs with flank-shaped noise (context_noise) or -60 dBFS white noise (comfort_noise)"""
    cfg = cfg or StftConfig()
    _check_range("blank_min_ms", p.blank_min_ms, 20.0, math.inf)
    blanks = find_blanks(audio, p.blank_min_ms)
    if not blanks:
        return audio

    rng = np.random.default_rng(seed)
    sr = audio.sample_rate_hz
    fade = max(1, round(CROSSFADE_S * sr))
    out = audio.samples.copy()
    for start, end in blanks:
        length = end - start
        fill = None
        if p.fill_mode == FillMode.CONTEXT_NOISE:
            fill = _context_noise(audio, start, end, cfg, rng)
            if fill is None:
                logger.debug(f"Blank {start}:{end} has silent flanks, using comfort noise")
        if fill is None:
            fill = rng.normal(0.0, COMFORT_NOISE_RMS, size=length)

        weight = np.ones(length)
        ramp = np.linspace(0.0, 1.0, min(fade, length), endpoint=False)
        if start > 0:
            weight[: ramp.size] = ramp
        if end < audio.n_samples:
            weight[length - ramp.size :] = np.minimum(weight[length - ramp.size :], ramp[::-1])
        out[start:end] = out[start:end] * (1.0 - weight) + fill * weight
    return _finalize(out, sr)


def apply_action(audio: AudioBuffer, action: EditAction, seed: int = 0, cfg: StftConfig | None = None) -> AudioBuffer:
    """Run one action; failures raised inside the signal libraries surface as ActionError"""
    try:
        return _dispatch(audio, action, seed, cfg)
    except AvalignError:
        raise
    except (ValueError, ArithmeticError, ParameterError) as e:
        logger.warning(f"{action.kind.value} failed inside a signal library: {e}")
        raise ActionError(f"{action.kind.value} failed: {e}") from e


def _dispatch(audio: AudioBuffer, action: EditAction, seed: int, cfg: StftConfig | None) -> AudioBuffer:
    params = action.params
    match action.kind, params:
        case ActionKind.SPECTRAL_SUBTRACTION, NoiseParams():
            return spectral_subtraction(audio, params, cfg)
        case ActionKind.WIENER_FILTER, NoiseParams():
            return wiener_filter(audio, params, cfg)
        case ActionKind.WAVELET_DENOISE, WaveletParams():
            return wavelet_denoise(audio, params)
        case ActionKind.SPECTRAL_GATE, NoiseParams():
            return spectral_gate(audio, params, cfg)
        case ActionKind.SPEED_MOD, CoordParams():
            return speed_mod(audio, params, cfg)
        case ActionKind.PITCH_MOD, CoordParams():
            return pitch_mod(audio, params, cfg)
        case ActionKind.VOLUME_ADJUST, CoordParams():
            return volume_adjust(audio, params)
        case ActionKind.FILL_BLANKS, CoordParams():
            return fill_blanks(audio, params, seed=seed, cfg=cfg)
        case _:
            raise ActionError(f"parameters {type(params).__name__} do not fit action {action.kind.value}")


def apply_plan(audio: AudioBuffer, plan: ActionPlan, seed: int = 0, cfg: StftConfig | None = None) -> AudioBuffer:
    """Apply the plan's actions in order; each action gets its own derived seed"""
    for index, action in enumerate(plan.actions):
        audio = apply_action(audio, action, seed=seed + index, cfg=cfg)
    return audio
