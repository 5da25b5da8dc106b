"""Layered pipeline configuration: defaults < YAML file < environment < command-line flags."""

import logging
import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from avalign.backend import BackendClient, BackendEndpoint
from avalign.captioning import CaptionSettings
from avalign.errors import ConfigError
from avalign.models import StftConfig, WorkflowConfig
from avalign.planning import RuleTable
from avalign.reflection import ClassProfiles
from avalign.workflow import WorkflowRunner, make_runner

logger = logging.getLogger(__name__)

URL_ENV = "AVALIGN_BACKEND_URL"
TOKEN_ENV = "AVALIGN_BACKEND_TOKEN"


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    workflow: WorkflowConfig = Field(default_factory=WorkflowConfig)
    stft: StftConfig = Field(default_factory=StftConfig)
    captions: CaptionSettings = Field(default_factory=CaptionSettings)
    rules: RuleTable = Field(default_factory=RuleTable)
    backend: Optional[BackendEndpoint] = None
    profiles_path: Optional[Path] = None
    parallelism: int = Field(default=1, ge=1)

    def redacted(self) -> dict[str, Any]:
        data = self.model_dump(mode="json")
        if self.backend is not None:
            data["backend"] = self.backend.redacted()
        return data

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.redacted(), sort_keys=True)

    def profiles(self) -> ClassProfiles:
        return ClassProfiles.load(self.profiles_path)

    def runner(self, client: Optional[BackendClient] = None) -> WorkflowRunner:
        return make_runner(
            self.workflow,
            stft=self.stft,
            captions=self.captions,
            rules=self.rules,
            profiles=self.profiles(),
            endpoint=self.backend,
            client=client,
        )


def merge(base: dict[str, Any], layer: Mapping[str, Any]) -> dict[str, Any]:
    """Recursive dict merge; layer values win, nested mappings merge"""
    out = dict(base)
    for key, value in layer.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = merge(dict(out[key]), value)
        else:
            out[key] = value
    return out


def read_yaml(path: Path) -> dict[str, Any]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        logger.error(f"Error reading config {path}: {e}")
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping at the top level")
    return data


def env_layer(environ: Optional[Mapping[str, str]] = None) -> dict[str, Any]:
    env = os.environ if environ is None else environ
    backend: dict[str, Any] = {}
    url = env.get(URL_ENV, "").strip()
    if url:
        backend["url"] = url
    token = env.get(TOKEN_ENV, "").strip()
    if token:
        backend["token"] = token
    return {"backend": backend} if backend else {}


def load_config(
    path: Optional[Path] = None,
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> PipelineConfig:
    data: dict[str, Any] = {}
    if path is not None:
        data = merge(data, read_yaml(path))
    data = merge(data, env_layer(environ))
    if overrides:
        data = merge(data, overrides)
    backend = data.get("backend")
    if isinstance(backend, Mapping) and "url" not in backend:
        # a token without a URL configures nothing
        logger.debug("Backend settings without a URL ignored")
        data.pop("backend")
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e.error_count()} errors")
        raise ConfigError(str(e)) from e
