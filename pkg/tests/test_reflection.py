import httpx
import numpy as np
import pytest
from scipy.ndimage import gaussian_filter1d

from avalign.audio import AudioBuffer
from avalign.backend import BackendClient, BackendEndpoint, FallbackMode
from avalign.corpus import apply_corruption, generate_pair
from avalign.errors import BackendMalformedResponse, DurationMismatch, EmptyAudio, UnknownLabelNoFallback
from avalign.models import CorruptionSpec, ScorerChoice, VideoFeatureSeries
from avalign.reflection import (
    ClassProfiles,
    ScorerKind,
    envelope_alignment,
    profile_similarity,
    reflect,
    score_alignment,
    score_temporal,
)

FRAME_RATE = 25.0
SAMPLES_PER_FRAME = 320


def audio_following(envelope: np.ndarray) -> AudioBuffer:
    """Audio whose per-frame RMS equals `envelope` exactly"""
    magnitude = np.repeat(envelope, SAMPLES_PER_FRAME)
    signs = np.where(np.arange(magnitude.size) % 2 == 0, 1.0, -1.0)
    return AudioBuffer(magnitude * signs)


def test_envelope_tracking_activity_scores_one():
    activity = np.random.default_rng(5).uniform(0.05, 0.9, 100)
    video = VideoFeatureSeries(frame_rate_hz=FRAME_RATE, activity=activity.tolist())
    assert score_temporal(audio_following(activity), video) == pytest.approx(1.0, abs=1e-9)


def test_anti_correlated_envelope_scores_zero():
    ramp = np.linspace(0.1, 0.9, 100)
    video = VideoFeatureSeries(frame_rate_hz=FRAME_RATE, activity=ramp.tolist())
    assert score_temporal(audio_following(1.0 - ramp), video) == pytest.approx(0.0, abs=1e-9)


def test_constant_activity_is_degenerate(clean_pair):
    audio, _ = clean_pair
    video = VideoFeatureSeries(frame_rate_hz=FRAME_RATE, activity=[0.5] * 100, labels=["dog"])
    scores = reflect(audio, video)
    assert scores.temporal == 0.5
    assert scores.temporal_degenerate


def test_duration_mismatch_rejected():
    audio = AudioBuffer(np.full(80000, 0.1))
    video = VideoFeatureSeries(frame_rate_hz=FRAME_RATE, activity=[0.2, 0.4] * 12 + [0.3])
    with pytest.raises(DurationMismatch):
        score_temporal(audio, video)


def test_matching_label_scores_higher(clean_pair):
    audio, video = clean_pair
    as_bird = video.model_copy(update={"labels": ["bird"]})
    assert score_alignment(audio, video) > score_alignment(audio, as_bird)


def test_alias_labels_resolve_to_profiles(clean_pair):
    audio, video = clean_pair
    phrased = video.model_copy(update={"labels": ["a puppy barking in the yard"]})
    assert score_alignment(audio, phrased) == score_alignment(audio, video)


def test_label_resolution():
    profiles = ClassProfiles.load()
    assert [p.name for p in profiles.resolve("Dog barking")] == ["dog"]
    assert [p.name for p in profiles.resolve("police car")] == ["siren", "engine"]
    assert profiles.resolve("hotdog stand") == []
    assert [p.name for p in profiles.resolve_all(["dog", "puppy", "rain"])] == ["dog", "rain"]


def test_unknown_label_without_fallback(clean_pair):
    audio, video = clean_pair
    unknown = video.model_copy(update={"labels": ["spaceship"]})
    with pytest.raises(UnknownLabelNoFallback):
        reflect(audio, unknown, ScorerKind(fallback=False))


def test_unknown_label_uses_envelope_fallback(clean_pair):
    audio, video = clean_pair
    unknown = video.model_copy(update={"labels": ["spaceship"]})
    scores = reflect(audio, unknown)
    assert scores.alignment_fallback
    assert scores.alignment == envelope_alignment(audio, unknown)


def test_silent_audio_is_neutral(profiles):
    silent = AudioBuffer(np.zeros(8000))
    assert profile_similarity(silent, profiles.profiles["dog"], ScorerKind().stft) == 0.5


def test_scores_are_bounded_and_deterministic(clean_pair):
    audio, video = clean_pair
    first = reflect(audio, video)
    assert 0.0 <= first.alignment <= 1.0
    assert 0.0 <= first.temporal <= 1.0
    assert first == reflect(audio, video)
    assert first.min_score == min(first.alignment, first.temporal)


def test_empty_audio_rejected(clean_pair):
    _, video = clean_pair
    with pytest.raises(EmptyAudio):
        reflect(AudioBuffer(np.zeros(0)), video)


def remote_scorer(handler, fallback: FallbackMode = FallbackMode.NONE) -> ScorerKind:
    endpoint = BackendEndpoint(url="http://backend.test/score", max_retries=0, backoff_s=0.0, fallback=fallback)
    client = BackendClient(endpoint, transport=httpx.MockTransport(handler))
    return ScorerKind(kind=ScorerChoice.REMOTE, endpoint=endpoint, client=client)


def test_remote_scores_are_clamped(clean_pair):
    audio, video = clean_pair
    scorer = remote_scorer(lambda request: httpx.Response(200, json={"scores": {"alignment": 1.4, "temporal": -0.2}}))
    scores = reflect(audio, video, scorer)
    assert scores.alignment == 1.0
    assert scores.temporal == 0.0


def test_remote_malformed_scores(clean_pair):
    audio, video = clean_pair
    scorer = remote_scorer(lambda request: httpx.Response(200, json={"scores": {"alignment": "high"}}))
    with pytest.raises(BackendMalformedResponse):
        reflect(audio, video, scorer)


def test_remote_failure_falls_back_to_proxy(clean_pair):
    audio, video = clean_pair
    scorer = remote_scorer(lambda request: httpx.Response(502), fallback=FallbackMode.BUILTIN)
    assert reflect(audio, video, scorer) == reflect(audio, video)


def test_temporal_score_ignores_volume(clean_pair):
    audio, video = clean_pair
    reference = score_temporal(audio, video)
    for alpha in (0.5, 0.1, 1e-3):
        assert score_temporal(AudioBuffer(alpha * audio.samples), video) == pytest.approx(reference, abs=1e-6)


def smooth_activity(rng: np.random.Generator, n_frames: int = 200) -> np.ndarray:
    """Slowly varying activity with no preferred period"""
    return np.clip(0.5 + 2.0 * gaussian_filter1d(rng.standard_normal(n_frames), sigma=12), 0.05, 1.0)


def mean_temporal_by_offset(n_pairs: int) -> list[float]:
    offsets = (0.25, 0.5, 1.0)
    totals = np.zeros(1 + len(offsets))
    for i in range(n_pairs):
        activity = smooth_activity(np.random.default_rng(100 + i))
        video = VideoFeatureSeries(frame_rate_hz=FRAME_RATE, activity=activity.tolist())
        audio = audio_following(activity)
        totals[0] += score_temporal(audio, video)
        for j, offset in enumerate(offsets, start=1):
            totals[j] += score_temporal(apply_corruption(audio, CorruptionSpec(offset_s=offset)), video)
    return (totals / n_pairs).tolist()


def mean_alignment_by_noise(profiles: ClassProfiles, n_pairs: int) -> list[float]:
    levels = (20.0, 10.0, 0.0, -10.0)
    totals = np.zeros(len(levels))
    for i in range(n_pairs):
        audio, video = generate_pair(profiles.profiles["dog"], np.random.default_rng(200 + i))
        for j, snr in enumerate(levels):
            totals[j] += score_alignment(apply_corruption(audio, CorruptionSpec(noise_snr_db=snr, seed=i)), video)
    return (totals / n_pairs).tolist()


def test_temporal_score_falls_with_offset():
    """Delays of 0, 0.25, 0.5 and 1 s give strictly decreasing mean temporal scores"""
    means = mean_temporal_by_offset(12)
    assert all(a > b for a, b in zip(means, means[1:])), means


def test_alignment_score_falls_with_noise(profiles):
    """Noise at 20, 10, 0 and -10 dB SNR gives strictly decreasing mean alignment scores"""
    means = mean_alignment_by_noise(profiles, 12)
    assert all(a > b for a, b in zip(means, means[1:])), means


@pytest.mark.slow
def test_score_monotonicity_over_a_hundred_pairs(profiles):
    temporal = mean_temporal_by_offset(100)
    alignment = mean_alignment_by_noise(profiles, 100)
    assert all(a > b for a, b in zip(temporal, temporal[1:])), temporal
    assert all(a > b for a, b in zip(alignment, alignment[1:])), alignment
