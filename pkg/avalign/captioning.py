"""Independent text descriptions of the audio track and of the video feature series.

The built-in describers render a fixed template over measured features, so identical inputs give
byte-identical captions. Audio and video are described separately: neither describer sees the
other modality.
"""

import logging
import math
from typing import Any, Optional, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from avalign.audio import AudioBuffer, compute_spectrogram, energy_envelope, estimate_noise_spectrum
from avalign.backend import BackendClient, BackendEndpoint, FallbackMode, encode_audio, encode_video
from avalign.errors import BackendError, BackendMalformedResponse, EmptyAudio, EmptyFeatures
from avalign.models import Caption, CaptionSource, StftConfig, VideoFeatureSeries

logger = logging.getLogger(__name__)

SNR_CLAMP_DB = (-30.0, 60.0)
CLIP_LEVEL = 0.999
TONAL_FLATNESS = 0.1


class CaptionSettings(BaseModel):
    """Feature extraction constants and the 'notable' thresholds the templates report"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    silence_notable: float = Field(default=0.2, ge=0, le=1)
    snr_notable_db: float = 10.0
    clipping_notable: float = Field(default=0.01, ge=0, le=1)
    silence_level: float = Field(default=1e-4, gt=0)
    silence_envelope_hz: float = Field(default=100.0, gt=0)
    tempo_envelope_hz: float = Field(default=50.0, gt=0)
    noise_percentile: float = Field(default=10.0, gt=0, le=50)
    static_activity: float = Field(default=0.05, ge=0)


def peak_rate(series: np.ndarray, rate_hz: float, min_spacing_s: float = 0.15) -> float:
    """Prominent peaks per second of a slowly varying series"""
    values = np.asarray(series, dtype=np.float64)
    if values.size < 3:
        return 0.0
    smoothed = uniform_filter1d(values, size=3, mode="nearest")
    spread = float(np.ptp(smoothed))
    if spread <= 1e-12:
        return 0.0
    distance = max(1, round(min_spacing_s * rate_hz))
    peaks, _ = find_peaks(smoothed, prominence=0.25 * spread, distance=distance)
    return len(peaks) / (values.size / rate_hz)


def estimate_snr_db(audio: AudioBuffer, percentile: float, cfg: StftConfig) -> float:
    """Mean frame power against the noise-floor estimate of the quietest frames, clamped"""
    spec = compute_spectrogram(audio, cfg)
    frames = spec.interior_frames()
    if frames.size == 0:
        frames = np.arange(spec.frames.shape[1])
    total = float(np.mean(np.sum(spec.magnitude[:, frames] ** 2, axis=0)))
    noise = float(np.sum(estimate_noise_spectrum(spec, percentile) ** 2))
    low, high = SNR_CLAMP_DB
    if noise <= 0.0:
        return high
    signal = total - noise
    if signal <= 0.0:
        return low
    return float(np.clip(10.0 * math.log10(signal / noise), low, high))


def audio_features(audio: AudioBuffer, settings: CaptionSettings, cfg: StftConfig) -> dict[str, float]:
    if audio.n_samples == 0:
        raise EmptyAudio("cannot describe empty audio")
    sr = audio.sample_rate_hz
    analysed = audio
    win = cfg.win_length(sr)
    if audio.n_samples < win:
        analysed = AudioBuffer(np.pad(audio.samples, (0, win - audio.n_samples)), sr)

    spec = compute_spectrogram(analysed, cfg)
    mean_magnitude = spec.magnitude.mean(axis=1)
    freqs = np.fft.rfftfreq(cfg.n_fft(sr), 1.0 / sr)
    weight = float(mean_magnitude.sum())
    centroid = float((freqs * mean_magnitude).sum() / weight) if weight > 0 else 0.0
    power = mean_magnitude**2 + 1e-20
    flatness = float(np.exp(np.mean(np.log(power))) / np.mean(power))

    silence = energy_envelope(audio, settings.silence_envelope_hz) < settings.silence_level
    tempo_envelope = energy_envelope(audio, settings.tempo_envelope_hz)
    return {
        "snr_estimate_db": estimate_snr_db(analysed, settings.noise_percentile, cfg),
        "silence_ratio": float(np.mean(silence)),
        "dominant_band_hz": centroid,
        "tempo_bpm_estimate": 60.0 * peak_rate(tempo_envelope, settings.tempo_envelope_hz),
        "clipping_ratio": float(np.mean(np.abs(audio.samples) >= CLIP_LEVEL)),
        "rms": audio.rms,
        "spectral_flatness": flatness,
        "duration_s": audio.duration_s,
    }


def _audio_text(features: dict[str, float], settings: CaptionSettings) -> str:
    if features["silence_ratio"] >= 0.999:
        return "Blank audio with no audible content."
    character = "A tonal sound" if features["spectral_flatness"] < TONAL_FLATNESS else "A broadband sound"
    text = f"{character} centred near {features['dominant_band_hz']:.0f} Hz"
    notes = []
    if features["snr_estimate_db"] < settings.snr_notable_db:
        notes.append(f"with background noise interference (about {features['snr_estimate_db']:.0f} dB SNR)")
    if features["silence_ratio"] > settings.silence_notable:
        notes.append(f"with silent gaps over {100 * features['silence_ratio']:.0f}% of the clip")
    if features["clipping_ratio"] > settings.clipping_notable:
        notes.append(f"with clipping on {100 * features['clipping_ratio']:.1f}% of samples")
    if features["tempo_bpm_estimate"] > 0:
        notes.append(f"pulsing at about {features['tempo_bpm_estimate']:.0f} beats per minute")
    if notes:
        text += ", " + ", ".join(notes)
    return text + "."


def describe_audio(
    audio: AudioBuffer, settings: Optional[CaptionSettings] = None, cfg: Optional[StftConfig] = None
) -> Caption:
    settings = settings or CaptionSettings()
    features = audio_features(audio, settings, cfg or StftConfig())
    return Caption(text=_audio_text(features, settings), features=features, source=CaptionSource.BUILTIN)


def describe_video(video: VideoFeatureSeries, settings: Optional[CaptionSettings] = None) -> Caption:
    settings = settings or CaptionSettings()
    if not video.activity:
        raise EmptyFeatures("video feature series has no activity values")
    activity = np.asarray(video.activity, dtype=np.float64)
    features: dict[str, Any] = {
        "activity_mean": float(activity.mean()),
        "activity_peak_rate": peak_rate(activity, video.frame_rate_hz),
        "labels": list(video.labels),
        "duration_s": video.duration_s,
    }

    subject = ", ".join(video.labels) if video.labels else "unlabelled content"
    if features["activity_mean"] < settings.static_activity or float(np.ptp(activity)) <= 1e-12:
        text = f"A static scene showing {subject}"
    elif features["activity_peak_rate"] > 0:
        text = f"A scene of {subject} with rhythmic activity at about {features['activity_peak_rate']:.1f} events per second"
    else:
        text = f"A scene of {subject} with continuous activity"
    if video.description_hint:
        text += f" ({video.description_hint})"
    return Caption(text=text + ".", features=features, source=CaptionSource.BUILTIN)


def _caption_from_reply(data: dict[str, Any]) -> Caption:
    text = data.get("text")
    features = data.get("features") or {}
    if not isinstance(text, str) or not text.strip():
        raise BackendMalformedResponse("caption reply has no text")
    if not isinstance(features, dict):
        raise BackendMalformedResponse("caption reply features must be an object")
    return Caption(text=text, features=features, source=CaptionSource.REMOTE)


def remote_caption(
    subject: AudioBuffer | VideoFeatureSeries,
    endpoint: BackendEndpoint,
    client: Optional[BackendClient] = None,
    settings: Optional[CaptionSettings] = None,
    cfg: Optional[StftConfig] = None,
) -> Caption:
    """Caption one modality through the backend, falling back to the builtin describer if configured"""
    if isinstance(subject, AudioBuffer):
        modality, payload = "audio", encode_audio(subject)
    else:
        modality, payload = "video", encode_video(subject)

    owned = client is None
    active = client or BackendClient(endpoint)
    try:
        return _caption_from_reply(active.post("caption", modality, payload))
    except BackendError as e:
        if endpoint.fallback != FallbackMode.BUILTIN:
            raise
        logger.warning(f"Remote {modality} caption failed, using builtin describer: {e}")
        if isinstance(subject, AudioBuffer):
            return describe_audio(subject, settings, cfg)
        return describe_video(subject, settings)
    finally:
        if owned:
            active.close()


class Captioner(Protocol):
    def caption_audio(self, audio: AudioBuffer) -> Caption: ...

    def caption_video(self, video: VideoFeatureSeries) -> Caption: ...


class BuiltinCaptioner:
    def __init__(self, settings: Optional[CaptionSettings] = None, cfg: Optional[StftConfig] = None):
        self.settings = settings or CaptionSettings()
        self.cfg = cfg or StftConfig()

    def caption_audio(self, audio: AudioBuffer) -> Caption:
        return describe_audio(audio, self.settings, self.cfg)

    def caption_video(self, video: VideoFeatureSeries) -> Caption:
        return describe_video(video, self.settings)


class RemoteCaptioner:
    def __init__(
        self,
        endpoint: BackendEndpoint,
        client: BackendClient,
        settings: Optional[CaptionSettings] = None,
        cfg: Optional[StftConfig] = None,
    ):
        self.endpoint = endpoint
        self.client = client
        self.settings = settings or CaptionSettings()
        self.cfg = cfg or StftConfig()

    def caption_audio(self, audio: AudioBuffer) -> Caption:
        return remote_caption(audio, self.endpoint, self.client, self.settings, self.cfg)

    def caption_video(self, video: VideoFeatureSeries) -> Caption:
        return remote_caption(video, self.endpoint, self.client, self.settings, self.cfg)
