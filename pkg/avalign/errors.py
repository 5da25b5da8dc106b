"""Exception hierarchy shared by every avalign module."""

from pathlib import Path


class AvalignError(Exception):
    """Base class for all pipeline errors"""


# Signal front-end
class SignalError(AvalignError):
    pass


class EmptyAudio(SignalError):
    pass


class TooShort(SignalError):
    pass


class DegenerateWindow(SignalError):
    pass


class InvalidAudio(SignalError):
    pass


# Actions
class ActionError(AvalignError):
    pass


class ParamOutOfRange(ActionError):
    pass


class SilentInput(ActionError):
    pass


# Captioning
class CaptionError(AvalignError):
    pass


class EmptyFeatures(CaptionError):
    pass


# Remote backend
class BackendError(AvalignError):
    pass


class BackendUnreachable(BackendError):
    pass


class BackendMalformedResponse(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


# Planning
class PlanError(AvalignError):
    pass


class MissingFeatures(PlanError):
    pass


class UnparseablePlan(PlanError):
    pass


class IllegalAction(PlanError):
    pass


# Reflection
class ScoreError(AvalignError):
    pass


class UnknownLabelNoFallback(ScoreError):
    pass


class DurationMismatch(ScoreError):
    pass


# Corpus
class CorpusError(AvalignError):
    pass


class ManifestParseError(CorpusError):
    """Malformed manifest line; `line` is 1-based"""

    def __init__(self, line: int, reason: str):
        super().__init__(f"manifest line {line}: {reason}")
        self.line = line
        self.reason = reason


class MissingAudioFile(CorpusError):
    def __init__(self, path: Path, pair_id: str = ""):
        prefix = f"pair {pair_id}: " if pair_id else ""
        super().__init__(f"{prefix}audio file not found: {path}")
        self.path = path


class DuplicatePairId(CorpusError):
    pass


class InsufficientPairs(CorpusError):
    pass


class ConfigError(AvalignError):
    pass
