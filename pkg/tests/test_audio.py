import numpy as np
import pytest
import soundfile as sf
from scipy.signal import find_peaks

from avalign.audio import (
    AudioBuffer,
    analysis_window,
    compute_spectrogram,
    energy_envelope,
    estimate_noise_spectrum,
    frame_count,
    invert_spectrogram,
    log_view,
    read_wav,
    write_wav,
)
from avalign.errors import DegenerateWindow, EmptyAudio, InvalidAudio, MissingAudioFile, SignalError
from avalign.models import StftConfig, WindowFn

from conftest import SR, tone


def test_audio_buffer_rejects_invalid_samples():
    """NaN, out-of-range and multichannel input are refused at construction"""
    with pytest.raises(InvalidAudio):
        AudioBuffer(np.array([0.0, np.nan]))
    with pytest.raises(InvalidAudio):
        AudioBuffer(np.array([0.0, 1.5]))
    with pytest.raises(InvalidAudio):
        AudioBuffer(np.zeros((2, 10)))


def test_audio_buffer_is_read_only():
    audio = AudioBuffer(np.zeros(10))
    with pytest.raises(ValueError):
        audio.samples[0] = 1.0


def test_from_unclipped_sanitises():
    audio = AudioBuffer.from_unclipped(np.array([2.0, -3.0, np.nan, 0.25]))
    assert audio.samples.tolist() == [1.0, -1.0, 0.0, 0.25]


def test_default_grid_at_working_rate():
    cfg = StftConfig()
    assert cfg.win_length(SR) == 400
    assert cfg.hop_length(SR) == 200
    assert cfg.n_fft(SR) == 512


def test_hop_longer_than_window_rejected():
    with pytest.raises(ValueError):
        StftConfig(window_ms=20, hop_ms=30)


def test_stft_round_trip_within_tolerance():
    """Analysis followed by overlap-add reproduces the input"""
    rng = np.random.default_rng(1)
    audio = AudioBuffer(0.3 * rng.uniform(-1, 1, SR))
    spec = compute_spectrogram(audio)
    assert spec.frames.shape == (257, frame_count(audio.n_samples, StftConfig(), SR))
    restored = invert_spectrogram(spec)
    assert restored.n_samples == audio.n_samples
    assert np.max(np.abs(restored.samples - audio.samples)) < 1e-4


def test_one_window_of_audio_gives_frames():
    """A buffer exactly one window long is analysable; shorter is EmptyAudio"""
    spec = compute_spectrogram(AudioBuffer(tone(440, 0.05)))
    assert spec.frames.shape[1] >= 1
    with pytest.raises(EmptyAudio):
        compute_spectrogram(AudioBuffer(tone(440, 0.049)))


def test_rect_window_without_overlap_cover_is_degenerate():
    """A rectangular window with hop equal to window still covers every sample; a zero-edged one does not"""
    cfg = StftConfig(window_ms=50, hop_ms=50, window_fn=WindowFn.RECT)
    audio = AudioBuffer(tone(440, 0.5))
    assert np.allclose(invert_spectrogram(compute_spectrogram(audio, cfg)).samples, audio.samples, atol=1e-9)

    hann_no_overlap = StftConfig(window_ms=50, hop_ms=50, window_fn=WindowFn.HANN)
    with pytest.raises(DegenerateWindow):
        invert_spectrogram(compute_spectrogram(audio, hann_no_overlap))


def test_log_view_shape_is_fixed():
    """Short and long clips both map to the configured view size"""
    for seconds in (0.2, 8.0):
        view = log_view(compute_spectrogram(AudioBuffer(tone(440, seconds))))
        assert view.shape == (128, 128)
        assert np.all(np.isfinite(view))


def test_energy_envelope_lengths_and_values():
    audio = AudioBuffer(np.full(8000, 0.5))
    envelope = energy_envelope(audio, 25.0)
    assert envelope.size == 25
    assert np.allclose(envelope, 0.5)

    # 1001 samples at 25 Hz ticks of 320 samples -> 4 ticks, the last partial
    assert energy_envelope(AudioBuffer(np.full(1001, 0.1)), 25.0).size == 4


def test_energy_envelope_rejects_bad_rate():
    with pytest.raises(SignalError):
        energy_envelope(AudioBuffer(np.zeros(100)), 0.0)
    with pytest.raises(EmptyAudio):
        energy_envelope(AudioBuffer(np.zeros(0)), 25.0)


def test_pcm16_passthrough_is_bit_exact(tmp_path):
    """Reading and re-writing a 16-bit WAV leaves its samples untouched"""
    rng = np.random.default_rng(3)
    raw = rng.integers(-20000, 20000, size=4000, dtype=np.int16)
    source = tmp_path / "in.wav"
    sf.write(str(source), raw, SR, subtype="PCM_16")

    copy = write_wav(read_wav(source), tmp_path / "out.wav")
    written, rate = sf.read(str(copy), dtype="int16")
    assert rate == SR
    assert np.array_equal(written, raw)


def test_read_wav_downmixes_and_resamples(tmp_path):
    stereo = np.stack([tone(440, 1.0, sr=16000), tone(440, 1.0, sr=16000)], axis=1)
    path = tmp_path / "stereo.wav"
    sf.write(str(path), stereo, 16000, subtype="FLOAT")
    audio = read_wav(path)
    assert audio.sample_rate_hz == SR
    assert audio.n_samples == SR
    assert audio.peak == pytest.approx(0.5, abs=0.02)


def test_read_wav_missing_and_unreadable(tmp_path):
    with pytest.raises(MissingAudioFile):
        read_wav(tmp_path / "absent.wav")
    junk = tmp_path / "junk.wav"
    junk.write_bytes(b"not a wav file")
    with pytest.raises(InvalidAudio):
        read_wav(junk)


def test_spectrogram_energy_tracks_signal_energy():
    """One-sided frame energy, compensated for the window gain, matches the sample energy within 1 %"""
    cfg = StftConfig()
    audio = AudioBuffer(0.3 * np.random.default_rng(5).uniform(-1, 1, 2 * SR))
    power = compute_spectrogram(audio, cfg).magnitude ** 2
    # interior bins stand for a positive and a negative frequency
    frame_energy = (power[0].sum() + power[-1].sum() + 2 * power[1:-1].sum()) / cfg.n_fft(SR)
    gain = np.sum(analysis_window(cfg, SR) ** 2) / cfg.hop_length(SR)
    assert frame_energy / gain == pytest.approx(np.sum(audio.samples**2), rel=0.01)


def test_spectrogram_is_linear_in_amplitude():
    audio = AudioBuffer(0.9 * np.random.default_rng(6).uniform(-1, 1, SR))
    reference = compute_spectrogram(audio).magnitude
    for alpha in (0.0, 0.37, 1.0):
        scaled = compute_spectrogram(AudioBuffer(alpha * audio.samples)).magnitude
        assert np.allclose(scaled, alpha * reference, rtol=1e-6, atol=1e-9 * reference.max())


def test_frames_match_a_direct_dft():
    """440 Hz unit sine: every checked frame equals an O(n^2) DFT of the windowed segment"""
    cfg = StftConfig()
    audio = AudioBuffer(tone(440, 0.5, amplitude=1.0))
    spec = compute_spectrogram(audio, cfg)
    win, hop, n_fft = cfg.win_length(SR), cfg.hop_length(SR), cfg.n_fft(SR)
    padded = np.concatenate([np.zeros(win // 2), audio.samples, np.zeros(win)])
    window = np.hanning(win + 1)[:-1]
    basis = np.exp(-2j * np.pi * np.arange(n_fft // 2 + 1)[:, None] * np.arange(win)[None, :] / n_fft)
    for m in (0, 4, spec.frames.shape[1] - 1):
        direct = np.abs(basis @ (padded[m * hop : m * hop + win] * window))
        assert np.allclose(spec.magnitude[:, m], direct, rtol=1e-6, atol=1e-6 * direct.max())


def test_energy_envelope_is_translation_covariant():
    samples = 0.3 * np.random.default_rng(8).uniform(-1, 1, SR)
    envelope = energy_envelope(AudioBuffer(samples), 100.0)
    for ticks in (1, 3, 7):
        shifted = energy_envelope(AudioBuffer(np.concatenate([np.zeros(80 * ticks), samples])), 100.0)
        assert np.allclose(shifted[ticks : ticks + envelope.size], envelope, rtol=0, atol=1e-6)


def test_energy_envelope_follows_amplitude_modulation():
    """A 2 Hz modulated tone peaks every 0.5 s, give or take one tick"""
    t = np.arange(3 * SR) / SR
    # modulation maxima fall on tick centres (20 Hz ticks of 22 whole 440 Hz cycles)
    modulation = 0.5 * (1 + np.cos(2 * np.pi * 2 * (t - 0.025)))
    envelope = energy_envelope(AudioBuffer(0.8 * modulation * np.sin(2 * np.pi * 440 * t)), 20.0)
    peaks, _ = find_peaks(envelope, distance=5)
    assert len(peaks) >= 5
    assert np.all(np.abs(np.diff(peaks) - 10) <= 1)


def test_noise_floor_ignores_a_steady_tone():
    """The floor under a steady tone stays at the level of the surrounding noise bins"""
    rng = np.random.default_rng(9)
    audio = AudioBuffer.from_unclipped(tone(440, 3.0, amplitude=0.3) + rng.normal(0.0, 0.02, 3 * SR))
    floor = estimate_noise_spectrum(compute_spectrogram(audio), 10.0)
    tone_bin = round(440 / (SR / 512))
    assert floor[tone_bin] < 2.0 * np.median(floor)
