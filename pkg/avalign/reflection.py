"""Alignment and temporal-synchronisation scores for an (audio, video) pair.

Proxy scorers:
- alignment: cosine similarity (after mean removal) between the audio's time-averaged
  log-magnitude profile and the reference profile of the video's labelled class, mapped to [0, 1];
  best label wins
- temporal: lag-0 Pearson correlation between the audio energy envelope and the video activity
  series, mapped to [0, 1]
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from avalign.audio import (
    AudioBuffer,
    band_frequencies,
    compute_spectrogram,
    energy_envelope,
    mean_log_profile,
    rebin_frequency,
)
from avalign.backend import BackendClient, BackendEndpoint, FallbackMode, encode_audio, encode_video
from avalign.errors import (
    BackendError,
    BackendMalformedResponse,
    DurationMismatch,
    EmptyAudio,
    EmptyFeatures,
    UnknownLabelNoFallback,
)
from avalign.models import ReflectionScores, ScorerChoice, StftConfig, VideoFeatureSeries

logger = logging.getLogger(__name__)

DEFAULT_PROFILES_PATH = Path(__file__).parent / "data" / "class_profiles.json"
MAX_DURATION_RATIO = 4.0
NEUTRAL_SCORE = 0.5


class ClassProfile(BaseModel):
    """Reference magnitude spectrum of one sound class, a floor plus Gaussian bands (center, width, weight) in Hz"""

    model_config = ConfigDict(frozen=True)

    name: str
    bands: list[tuple[float, float, float]] = Field(min_length=1)
    aliases: list[str] = Field(default_factory=list)
    floor: float = Field(default=0.01, ge=0)

    def spectrum(self, freqs: np.ndarray) -> np.ndarray:
        shape = np.full(np.shape(freqs), self.floor, dtype=np.float64)
        for center, width, weight in self.bands:
            shape += weight * np.exp(-0.5 * ((np.asarray(freqs) - center) / width) ** 2)
        return shape / shape.max()

    def centroid_hz(self, nyquist_hz: float = 4000.0) -> float:
        freqs = np.linspace(0.0, nyquist_hz, 1024)
        shape = self.spectrum(freqs)
        return float((freqs * shape).sum() / shape.sum())

    def synthesize(self, n_samples: int, sample_rate_hz: int, rng: np.random.Generator) -> np.ndarray:
        """Unit-RMS noise whose magnitude spectrum follows the profile"""
        white = rng.standard_normal(n_samples)
        shaped = np.fft.irfft(
            np.fft.rfft(white) * self.spectrum(np.fft.rfftfreq(n_samples, 1.0 / sample_rate_hz)), n=n_samples
        )
        rms = float(np.sqrt(np.mean(shaped**2)))
        return shaped / rms if rms > 0 else shaped


class ClassProfiles:
    """Versioned table of class profiles with alias and substring label matching"""

    def __init__(self, profiles: dict[str, ClassProfile], version: int = 1):
        self.profiles = dict(sorted(profiles.items()))
        self.version = version
        self._names = sorted(
            ((name.lower(), key) for key, profile in self.profiles.items() for name in [key, *profile.aliases]),
            key=lambda item: (-len(item[0]), item[0]),
        )

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "ClassProfiles":
        floor = float(data.get("floor", 0.01))
        profiles = {
            name: ClassProfile(name=name, floor=floor, **entry) for name, entry in data.get("profiles", {}).items()
        }
        return cls(profiles, version=int(data.get("version", 1)))

    @classmethod
    def load(cls, path: Optional[Path] = None) -> "ClassProfiles":
        return _load_profiles(Path(path or DEFAULT_PROFILES_PATH).resolve())

    @property
    def labels(self) -> list[str]:
        return list(self.profiles)

    def resolve(self, label: str) -> list[ClassProfile]:
        """Profiles whose name or alias occurs as a whole word (or phrase) in the label"""
        text = label.lower().strip()
        found: list[str] = []
        for name, key in self._names:
            if key not in found and re.search(rf"\b{re.escape(name)}\b", text):
                found.append(key)
        return [self.profiles[key] for key in found]

    def resolve_all(self, labels: list[str]) -> list[ClassProfile]:
        out: list[ClassProfile] = []
        for label in labels:
            out.extend(p for p in self.resolve(label) if p not in out)
        return out


@lru_cache(maxsize=8)
def _load_profiles(path: Path) -> ClassProfiles:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        logger.error(f"Error loading class profiles {path}: {e}")
        raise
    profiles = ClassProfiles.from_mapping(data)
    logger.debug(f"Loaded {len(profiles.profiles)} class profiles (version {profiles.version}) from {path}")
    return profiles


@dataclass
class ScorerKind:
    """Scorer selection: signal-level proxies, or the remote backend"""

    kind: ScorerChoice = ScorerChoice.PROXY
    class_profiles: ClassProfiles = field(default_factory=ClassProfiles.load)
    # fall back to envelope-only alignment when no label has a profile
    fallback: bool = True
    stft: StftConfig = field(default_factory=StftConfig)
    endpoint: Optional[BackendEndpoint] = None
    client: Optional[BackendClient] = None


def _require_inputs(audio: AudioBuffer, video: VideoFeatureSeries) -> None:
    if audio.n_samples == 0:
        raise EmptyAudio("cannot score empty audio")
    if not video.activity:
        raise EmptyFeatures("cannot score against an empty activity series")


def _centered_cosine(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    a = a - a.mean()
    b = b - b.mean()
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm <= 1e-12:
        return None
    return float(np.dot(a, b) / norm)


def _to_unit(correlation: float) -> float:
    return float(np.clip((1.0 + correlation) / 2.0, 0.0, 1.0))


def profile_similarity(audio: AudioBuffer, profile: ClassProfile, cfg: StftConfig) -> float:
    """Alignment of the audio against one class profile; silent audio scores 0.5"""
    if audio.n_samples < cfg.win_length(audio.sample_rate_hz):
        pad = cfg.win_length(audio.sample_rate_hz) - audio.n_samples
        audio = AudioBuffer(np.pad(audio.samples, (0, pad)), audio.sample_rate_hz)
    spec = compute_spectrogram(audio, cfg)
    observed = mean_log_profile(spec)
    level = float(rebin_frequency(spec.magnitude, spec).mean(axis=1).max())
    if level <= 0.0:
        return NEUTRAL_SCORE
    reference = np.log1p(profile.spectrum(band_frequencies(cfg, audio.sample_rate_hz)) * level)
    correlation = _centered_cosine(observed, reference)
    return NEUTRAL_SCORE if correlation is None else _to_unit(correlation)


def envelope_alignment(audio: AudioBuffer, video: VideoFeatureSeries) -> float:
    """Label-free alignment: agreement of active/inactive state between envelope and activity"""
    envelope, activity = _paired_series(audio, video)
    if envelope.max() <= 0.0:
        return NEUTRAL_SCORE
    audio_on = envelope > 0.1 * envelope.max()
    video_on = activity > 0.1 * activity.max() if activity.max() > 0 else np.zeros_like(audio_on)
    return float(np.mean(audio_on == video_on))


def _paired_series(audio: AudioBuffer, video: VideoFeatureSeries) -> tuple[np.ndarray, np.ndarray]:
    ratio = max(audio.duration_s, video.duration_s) / max(min(audio.duration_s, video.duration_s), 1e-12)
    if ratio > MAX_DURATION_RATIO:
        raise DurationMismatch(
            f"audio {audio.duration_s:.2f}s and video {video.duration_s:.2f}s differ by more than {MAX_DURATION_RATIO:g}x"
        )
    envelope = energy_envelope(audio, video.frame_rate_hz)
    activity = np.asarray(video.activity, dtype=np.float64)
    n = min(envelope.size, activity.size)
    return envelope[:n], activity[:n]


def _proxy_alignment(audio: AudioBuffer, video: VideoFeatureSeries, s: ScorerKind) -> tuple[float, bool]:
    profiles = s.class_profiles.resolve_all(video.labels)
    if not profiles:
        if not s.fallback:
            raise UnknownLabelNoFallback(f"no class profile for labels {video.labels}")
        logger.debug(f"No class profile for labels {video.labels}, using envelope-only alignment")
        return envelope_alignment(audio, video), True
    return max(profile_similarity(audio, profile, s.stft) for profile in profiles), False


def _proxy_temporal(audio: AudioBuffer, video: VideoFeatureSeries) -> tuple[float, bool]:
    envelope, activity = _paired_series(audio, video)
    if envelope.std() <= 1e-12 or activity.std() <= 1e-12:
        logger.warning("Zero-variance envelope or activity series, temporal score pinned to 0.5")
        return NEUTRAL_SCORE, True
    za = (envelope - envelope.mean()) / envelope.std()
    zv = (activity - activity.mean()) / activity.std()
    return _to_unit(float(np.mean(za * zv))), False


def _remote_scores(audio: AudioBuffer, video: VideoFeatureSeries, s: ScorerKind) -> Optional[ReflectionScores]:
    """Backend scores, or None when the call failed and builtin fallback is configured"""
    if s.client is None or s.endpoint is None:
        raise BackendError("remote scorer selected without a backend endpoint")
    try:
        data = s.client.post("score", "av", {"audio": encode_audio(audio), "video": encode_video(video)})
        return _scores_from_reply(data)
    except BackendError as e:
        if s.endpoint.fallback != FallbackMode.BUILTIN:
            raise
        logger.warning(f"Remote scoring failed, using proxy scorers: {e}")
        return None


def _scores_from_reply(data: dict[str, Any]) -> ReflectionScores:
    """Backend scores clamped to [0, 1]"""
    scores = data.get("scores")
    if not isinstance(scores, dict):
        raise BackendMalformedResponse("score reply has no scores object")
    try:
        values = [float(scores["alignment"]), float(scores["temporal"])]
    except (KeyError, TypeError, ValueError) as e:
        logger.error(f"Malformed score reply: {e}")
        raise BackendMalformedResponse(f"malformed score reply: {e}") from e
    if not all(math.isfinite(v) for v in values):
        raise BackendMalformedResponse("score reply holds non-finite values")
    return ReflectionScores(
        alignment=float(np.clip(values[0], 0.0, 1.0)), temporal=float(np.clip(values[1], 0.0, 1.0))
    )


def score_alignment(audio: AudioBuffer, video: VideoFeatureSeries, s: Optional[ScorerKind] = None) -> float:
    s = s or ScorerKind()
    _require_inputs(audio, video)
    if s.kind == ScorerChoice.REMOTE:
        remote = _remote_scores(audio, video, s)
        if remote is not None:
            return remote.alignment
    return _proxy_alignment(audio, video, s)[0]


def score_temporal(audio: AudioBuffer, video: VideoFeatureSeries, s: Optional[ScorerKind] = None) -> float:
    s = s or ScorerKind()
    _require_inputs(audio, video)
    if s.kind == ScorerChoice.REMOTE:
        remote = _remote_scores(audio, video, s)
        if remote is not None:
            return remote.temporal
    return _proxy_temporal(audio, video)[0]


def reflect(audio: AudioBuffer, video: VideoFeatureSeries, s: Optional[ScorerKind] = None) -> ReflectionScores:
    s = s or ScorerKind()
    _require_inputs(audio, video)
    if s.kind == ScorerChoice.REMOTE:
        remote = _remote_scores(audio, video, s)
        if remote is not None:
            return remote
    alignment, fallback = _proxy_alignment(audio, video, s)
    temporal, degenerate = _proxy_temporal(audio, video)
    return ReflectionScores(
        alignment=alignment, temporal=temporal, temporal_degenerate=degenerate, alignment_fallback=fallback
    )
