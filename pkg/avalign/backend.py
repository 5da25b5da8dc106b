"""HTTP client for the remote caption / plan / score backend.

Wire format: POST a JSON object {task, modality, payload, context}; the reply is a JSON object
{text, features?, actions?, scores?}. Audio travels as base64 16-bit WAV.
"""

import base64
import io
import logging
import threading
import time
from enum import Enum
from typing import Any, Optional

import httpx
import soundfile as sf
from pydantic import BaseModel, ConfigDict, Field

from avalign.audio import AudioBuffer, to_pcm16
from avalign.errors import BackendError, BackendMalformedResponse, BackendTimeout, BackendUnreachable
from avalign.models import VideoFeatureSeries, canonical_json

logger = logging.getLogger(__name__)

URL_ENV = "AVALIGN_BACKEND_URL"
TOKEN_ENV = "AVALIGN_BACKEND_TOKEN"


class FallbackMode(str, Enum):
    NONE = "none"
    BUILTIN = "builtin"


class BackendEndpoint(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    url: str = Field(min_length=1)
    token: Optional[str] = None
    timeout_s: float = Field(default=10.0, gt=0)
    max_retries: int = Field(default=2, ge=0)
    backoff_s: float = Field(default=0.5, ge=0)
    max_payload_bytes: int = Field(default=8 * 1024 * 1024, gt=0)
    fallback: FallbackMode = FallbackMode.NONE
    max_in_flight: int = Field(default=4, ge=1)

    def redacted(self) -> dict[str, Any]:
        data = self.model_dump(mode="json")
        if data.get("token"):
            data["token"] = "***"
        return data


class BackendClient:
    """Blocking client with retries on connection failures and 5xx, bounded in-flight requests"""

    def __init__(self, endpoint: BackendEndpoint, transport: Optional[httpx.BaseTransport] = None):
        self.endpoint = endpoint
        headers = {"Content-Type": "application/json"}
        if endpoint.token:
            headers["Authorization"] = f"Bearer {endpoint.token}"
        self._client = httpx.Client(timeout=endpoint.timeout_s, headers=headers, transport=transport)
        self._slots = threading.BoundedSemaphore(endpoint.max_in_flight)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "BackendClient":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def post(self, task: str, modality: str, payload: Any, context: Optional[dict[str, Any]] = None) -> dict[str, Any]:
        body = canonical_json({"task": task, "modality": modality, "payload": payload, "context": context or {}})
        encoded = body.encode("utf-8")
        if len(encoded) > self.endpoint.max_payload_bytes:
            raise BackendError(f"{task} request of {len(encoded)} bytes exceeds {self.endpoint.max_payload_bytes}")

        with self._slots:
            response = self._send(task, encoded)
        try:
            data = response.json()
        except ValueError as e:
            logger.error(f"Backend {task} reply is not JSON: {e}")
            raise BackendMalformedResponse(f"{task} reply is not JSON") from e
        if not isinstance(data, dict):
            raise BackendMalformedResponse(f"{task} reply is a {type(data).__name__}, expected an object")
        return data

    def _send(self, task: str, body: bytes) -> httpx.Response:
        attempts = self.endpoint.max_retries + 1
        failure: BackendError = BackendUnreachable(f"{self.endpoint.url} not contacted")
        for attempt in range(1, attempts + 1):
            try:
                response = self._client.post(self.endpoint.url, content=body)
            except httpx.TimeoutException as e:
                logger.warning(f"Backend {task} attempt {attempt}/{attempts} timed out: {e}")
                failure = BackendTimeout(f"{self.endpoint.url} timed out after {self.endpoint.timeout_s}s")
            except httpx.TransportError as e:
                logger.warning(f"Backend {task} attempt {attempt}/{attempts} failed: {e}")
                failure = BackendUnreachable(f"{self.endpoint.url} unreachable: {e}")
            else:
                if response.status_code < 500:
                    if response.status_code >= 400:
                        raise BackendMalformedResponse(f"{task} rejected with HTTP {response.status_code}")
                    return response
                logger.warning(f"Backend {task} attempt {attempt}/{attempts} got HTTP {response.status_code}")
                failure = BackendUnreachable(f"{self.endpoint.url} answered HTTP {response.status_code}")
            if attempt < attempts and self.endpoint.backoff_s > 0:
                time.sleep(self.endpoint.backoff_s * 2 ** (attempt - 1))
        raise failure


def encode_audio(audio: AudioBuffer) -> str:
    buffer = io.BytesIO()
    sf.write(buffer, to_pcm16(audio), audio.sample_rate_hz, format="WAV", subtype="PCM_16")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def encode_video(video: VideoFeatureSeries) -> dict[str, Any]:
    return video.model_dump(mode="json", exclude_none=True)
