import json

import httpx
import numpy as np
import pytest

from avalign.audio import AudioBuffer
from avalign.backend import BackendClient, BackendEndpoint, FallbackMode
from avalign.captioning import (
    BuiltinCaptioner,
    RemoteCaptioner,
    describe_audio,
    describe_video,
    peak_rate,
    remote_caption,
)
from avalign.errors import BackendMalformedResponse, BackendUnreachable, EmptyAudio
from avalign.models import CaptionSource, VideoFeatureSeries

from conftest import SR, bursts, tone


def test_audio_caption_is_deterministic(clean_pair):
    audio, _ = clean_pair
    assert describe_audio(audio) == describe_audio(audio)
    assert describe_audio(audio).text == describe_audio(audio).text


def test_audio_caption_features_present(clean_pair):
    audio, _ = clean_pair
    caption = describe_audio(audio)
    for name in ("snr_estimate_db", "silence_ratio", "dominant_band_hz", "tempo_bpm_estimate", "clipping_ratio", "rms"):
        assert name in caption.features
    assert caption.source == CaptionSource.BUILTIN
    assert caption.features["duration_s"] == pytest.approx(audio.duration_s)


def test_silent_audio_caption():
    caption = describe_audio(AudioBuffer(np.zeros(SR)))
    assert caption.text == "Blank audio with no audible content."
    assert caption.features["silence_ratio"] == 1.0
    assert caption.features["rms"] == 0.0


def test_tonal_caption_reports_centroid():
    caption = describe_audio(AudioBuffer(tone(440, 1.0)))
    assert caption.text.startswith("A tonal sound centred near")
    assert caption.features["dominant_band_hz"] == pytest.approx(440, abs=50)


def test_noisy_audio_caption_mentions_noise():
    rng = np.random.default_rng(0)
    samples = bursts(500, 4.0, 0.1) + rng.normal(0.0, 0.1, 4 * SR)
    caption = describe_audio(AudioBuffer.from_unclipped(samples))
    assert caption.features["snr_estimate_db"] < 10
    assert "background noise interference" in caption.text


def test_clean_steady_tone_is_not_called_noisy():
    """A steady sine is present in the quietest frames too; it must not count as noise floor"""
    caption = describe_audio(AudioBuffer(tone(440, 3.0)))
    assert caption.features["snr_estimate_db"] > 20
    assert "noise" not in caption.text


def test_steady_tone_in_noise_estimates_its_snr():
    rng = np.random.default_rng(2)
    clean = tone(440, 3.0, amplitude=0.2)
    noisy = clean + rng.normal(0.0, np.sqrt(np.mean(clean**2)), clean.size)
    caption = describe_audio(AudioBuffer.from_unclipped(noisy))
    assert -3.0 < caption.features["snr_estimate_db"] < 6.0
    assert "background noise interference" in caption.text


def test_bursts_report_tempo_and_clean_floor():
    caption = describe_audio(AudioBuffer(bursts(500, 4.0, 0.5)))
    # gaps between bursts are digital silence, so the noise floor is zero
    assert caption.features["snr_estimate_db"] == 60.0
    assert 90 <= caption.features["tempo_bpm_estimate"] <= 130
    assert "beats per minute" in caption.text


def test_clipping_is_reported():
    clipped = np.clip(4.0 * tone(200, 1.0), -1.0, 1.0)
    caption = describe_audio(AudioBuffer(clipped))
    assert caption.features["clipping_ratio"] > 0.01
    assert "clipping" in caption.text


def test_short_audio_is_padded_for_analysis():
    caption = describe_audio(AudioBuffer(tone(440, 0.01)))
    assert caption.features["duration_s"] == pytest.approx(0.01)


def test_empty_audio_rejected():
    with pytest.raises(EmptyAudio):
        describe_audio(AudioBuffer(np.zeros(0)))


def test_video_caption_static_and_rhythmic():
    static = VideoFeatureSeries(frame_rate_hz=25, activity=[0.0] * 50, labels=["car"])
    assert describe_video(static).text == "A static scene showing car."

    pulses = np.tile(np.r_[np.ones(3), np.zeros(9)], 25).tolist()
    rhythmic = describe_video(VideoFeatureSeries(frame_rate_hz=24, activity=pulses, labels=["dog"]))
    assert rhythmic.features["activity_peak_rate"] == pytest.approx(2.0, abs=0.25)
    assert "rhythmic activity" in rhythmic.text
    assert rhythmic.features["labels"] == ["dog"]


def test_video_caption_appends_hint():
    video = VideoFeatureSeries(frame_rate_hz=25, activity=[0.2, 0.4, 0.3], description_hint="indoors")
    assert describe_video(video).text.endswith("(indoors).")


def test_peak_rate_of_flat_series_is_zero():
    assert peak_rate(np.ones(100), 25.0) == 0.0
    assert peak_rate(np.array([1.0, 2.0]), 25.0) == 0.0


def test_builtin_captioner_matches_functions(clean_pair):
    audio, video = clean_pair
    captioner = BuiltinCaptioner()
    assert captioner.caption_audio(audio) == describe_audio(audio)
    assert captioner.caption_video(video) == describe_video(video)


def caption_client(handler, **endpoint) -> tuple[BackendEndpoint, BackendClient]:
    settings = BackendEndpoint(url="http://backend.test/v1", backoff_s=0.0, **endpoint)
    return settings, BackendClient(settings, transport=httpx.MockTransport(handler))


def test_remote_caption_parses_reply(clean_pair):
    audio, video = clean_pair
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(json.loads(request.content))
        return httpx.Response(200, json={"text": "a dog barking", "features": {"loud": True}})

    endpoint, client = caption_client(handler)
    captioner = RemoteCaptioner(endpoint, client)
    caption = captioner.caption_audio(audio)
    assert caption.text == "a dog barking"
    assert caption.source == CaptionSource.REMOTE
    assert seen[0]["task"] == "caption"
    assert seen[0]["modality"] == "audio"

    captioner.caption_video(video)
    assert seen[1]["modality"] == "video"
    assert seen[1]["payload"]["labels"] == ["dog"]


def test_remote_caption_without_text_is_malformed(clean_pair):
    audio, _ = clean_pair
    endpoint, client = caption_client(lambda request: httpx.Response(200, json={"features": {}}))
    with pytest.raises(BackendMalformedResponse):
        remote_caption(audio, endpoint, client)


def test_remote_caption_failure_without_fallback(clean_pair):
    _, video = clean_pair
    endpoint, client = caption_client(lambda request: httpx.Response(503), max_retries=0)
    with pytest.raises(BackendUnreachable):
        remote_caption(video, endpoint, client)


def test_remote_caption_falls_back_to_builtin(clean_pair):
    _, video = clean_pair
    endpoint, client = caption_client(lambda request: httpx.Response(503), max_retries=0, fallback=FallbackMode.BUILTIN)
    assert remote_caption(video, endpoint, client) == describe_video(video)
