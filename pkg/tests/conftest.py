from pathlib import Path
from typing import Callable, Generator

import numpy as np
import pytest

from avalign.audio import AudioBuffer, write_wav
from avalign.corpus import generate_pair
from avalign.database import reset_db, use_database
from avalign.models import AVPairRecord, VideoFeatureSeries
from avalign.reflection import ClassProfiles

SR = 8000


def tone(freq_hz: float, duration_s: float, amplitude: float = 0.5, sr: int = SR) -> np.ndarray:
    t = np.arange(round(duration_s * sr)) / sr
    return amplitude * np.sin(2 * np.pi * freq_hz * t)


def bursts(freq_hz: float, duration_s: float, amplitude: float, period_s: float = 0.5, sr: int = SR) -> np.ndarray:
    """Tone switched on for the first half of every period"""
    t = np.arange(round(duration_s * sr)) / sr
    on = (t % period_s) < period_s / 2
    return amplitude * np.sin(2 * np.pi * freq_hz * t) * on


def oracle_snr_db(clean: np.ndarray, processed: np.ndarray) -> float:
    error = processed - clean
    return float(10 * np.log10(np.sum(clean**2) / np.sum(error**2)))


@pytest.fixture()
def profiles() -> ClassProfiles:
    return ClassProfiles.load()


@pytest.fixture()
def clean_pair(profiles: ClassProfiles) -> tuple[AudioBuffer, VideoFeatureSeries]:
    """A generated dog pair whose loudness follows the activity pulses"""
    return generate_pair(profiles.profiles["dog"], np.random.default_rng(0))


@pytest.fixture()
def pair_on_disk(tmp_path: Path) -> Callable[[str, AudioBuffer, VideoFeatureSeries], AVPairRecord]:
    """Write audio under tmp_path/audio and return the manifest record"""

    def write(pair_id: str, audio: AudioBuffer, video: VideoFeatureSeries) -> AVPairRecord:
        write_wav(audio, tmp_path / "audio" / f"{pair_id}.wav")
        return AVPairRecord(pair_id=pair_id, audio_path=f"audio/{pair_id}.wav", video_features=video)

    return write


@pytest.fixture()
def clean_db(tmp_path: Path) -> Generator[None, None, None]:
    """Clean database for each test"""
    use_database(f"sqlite:///{tmp_path / 'runs.db'}")
    reset_db()
    yield
    reset_db()
