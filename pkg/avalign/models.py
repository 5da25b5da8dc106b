import json
import math
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Optional

import sqlmodel
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sqlmodel import JSON, Column, Relationship, SQLModel


# Persistent models (stored in database)
class BatchRun(SQLModel, table=True):
    """One recorded run_batch invocation"""

    __tablename__ = "batch_runs"  # type: ignore[assignment]

    id: Optional[int] = sqlmodel.Field(default=None, primary_key=True)
    out_dir: str = sqlmodel.Field(max_length=1000)
    manifest_path: str = sqlmodel.Field(max_length=1000)
    planner: str = sqlmodel.Field(max_length=20)
    n_pairs: int = sqlmodel.Field(default=0)
    n_completed: int = sqlmodel.Field(default=0)
    n_errored: int = sqlmodel.Field(default=0)
    mean_baseline_min: float = sqlmodel.Field(default=0.0)
    mean_final_min: float = sqlmodel.Field(default=0.0)
    config: dict[str, Any] = sqlmodel.Field(default_factory=dict, sa_column=Column(JSON))
    created_at: datetime = sqlmodel.Field(default_factory=lambda: datetime.now(timezone.utc))

    outcomes: list["PairOutcome"] = Relationship(back_populates="run")


class PairOutcome(SQLModel, table=True):
    """Final state of one pair inside a recorded batch"""

    __tablename__ = "pair_outcomes"  # type: ignore[assignment]

    id: Optional[int] = sqlmodel.Field(default=None, primary_key=True)
    run_id: int = sqlmodel.Field(foreign_key="batch_runs.id")
    pair_id: str = sqlmodel.Field(max_length=200)
    terminal_reason: str = sqlmodel.Field(max_length=30)
    cycles: int = sqlmodel.Field(default=0)
    baseline_alignment: Optional[float] = sqlmodel.Field(default=None)
    baseline_temporal: Optional[float] = sqlmodel.Field(default=None)
    final_alignment: Optional[float] = sqlmodel.Field(default=None)
    final_temporal: Optional[float] = sqlmodel.Field(default=None)
    error: Optional[str] = sqlmodel.Field(default=None, max_length=2000)

    run: Optional[BatchRun] = Relationship(back_populates="outcomes")


# Non-persistent schemas
def canonical_json(data: Any) -> str:
    """Sorted-key compact JSON used for manifests, traces and plan signatures"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class WindowFn(str, Enum):
    HANN = "hann"
    RECT = "rect"


class StftConfig(BaseModel):
    """Analysis grid shared by filters, vocoder, captions and scorers"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    window_ms: float = Field(default=50.0, gt=0)
    hop_ms: float = Field(default=25.0, gt=0)
    window_fn: WindowFn = WindowFn.HANN
    n_freq_bins: int = Field(default=128, ge=2)
    n_time_frames: int = Field(default=128, ge=1)

    @model_validator(mode="after")
    def _hop_within_window(self) -> "StftConfig":
        if self.hop_ms > self.window_ms:
            raise ValueError(f"hop_ms ({self.hop_ms}) must not exceed window_ms ({self.window_ms})")
        return self

    def win_length(self, sample_rate_hz: int) -> int:
        return max(1, round(sample_rate_hz * self.window_ms / 1000))

    def hop_length(self, sample_rate_hz: int) -> int:
        return max(1, round(sample_rate_hz * self.hop_ms / 1000))

    def n_fft(self, sample_rate_hz: int) -> int:
        """Next power of two at or above the window length"""
        return 1 << (self.win_length(sample_rate_hz) - 1).bit_length()


class ActionKind(str, Enum):
    SPECTRAL_SUBTRACTION = "spectral_subtraction"
    WIENER_FILTER = "wiener_filter"
    WAVELET_DENOISE = "wavelet_denoise"
    SPECTRAL_GATE = "spectral_gate"
    SPEED_MOD = "speed_mod"
    PITCH_MOD = "pitch_mod"
    VOLUME_ADJUST = "volume_adjust"
    FILL_BLANKS = "fill_blanks"

    @property
    def is_noise_filter(self) -> bool:
        return self in NOISE_FILTER_KINDS


NOISE_FILTER_KINDS = frozenset(
    {
        ActionKind.SPECTRAL_SUBTRACTION,
        ActionKind.WIENER_FILTER,
        ActionKind.WAVELET_DENOISE,
        ActionKind.SPECTRAL_GATE,
    }
)


class NoiseParams(BaseModel):
    """Parameters of spectral_subtraction, wiener_filter and spectral_gate"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    noise_percentile: float = Field(default=10.0, gt=0, le=50)
    oversubtraction: float = Field(default=1.5, ge=1)
    floor_db: float = Field(default=-40.0, le=0)
    gate_threshold_db: float = -35.0
    gate_attack_ms: float = Field(default=5.0, ge=0)
    gate_release_ms: float = Field(default=50.0, ge=0)


class WaveletName(str, Enum):
    HAAR = "haar"
    DB4 = "db4"


class ThresholdRule(str, Enum):
    UNIVERSAL = "universal"
    # universal on sparse bands, SURE-minimising (capped at universal) on dense ones
    HEURSURE = "heursure"


class WaveletParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    wavelet: WaveletName = WaveletName.DB4
    levels: int = Field(default=5, ge=1, le=8)
    threshold_rule: ThresholdRule = ThresholdRule.HEURSURE
    threshold_mode: str = Field(default="soft", pattern="^soft$")
    # 0 disables thresholding (analysis/synthesis round-trip only)
    threshold_scale: float = Field(default=1.0, ge=0)


class FillMode(str, Enum):
    CONTEXT_NOISE = "context_noise"
    COMFORT_NOISE = "comfort_noise"


class CoordParams(BaseModel):
    """Parameters of the four coordination actions; each action reads its own fields"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    speed_factor: Optional[float] = Field(default=None, ge=0.5, le=2.0)
    pitch_semitones: Optional[float] = Field(default=None, ge=-12, le=12)
    gain_db: Optional[float] = Field(default=None, ge=-30, le=30)
    target_rms: Optional[float] = Field(default=None, gt=0, le=1)
    blank_min_ms: float = Field(default=120.0, ge=20)
    fill_mode: FillMode = FillMode.CONTEXT_NOISE


ActionParams = NoiseParams | WaveletParams | CoordParams


def params_class(kind: ActionKind) -> type[NoiseParams] | type[WaveletParams] | type[CoordParams]:
    match kind:
        case ActionKind.WAVELET_DENOISE:
            return WaveletParams
        case ActionKind.SPECTRAL_SUBTRACTION | ActionKind.WIENER_FILTER | ActionKind.SPECTRAL_GATE:
            return NoiseParams
        case _:
            return CoordParams


class EditAction(BaseModel):
    """One of the eight editing actions with its validated parameter record"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ActionKind
    params: ActionParams
    rationale: str = ""

    @model_validator(mode="before")
    @classmethod
    def _coerce_params(cls, data: Any) -> Any:
        if not isinstance(data, dict) or "kind" not in data:
            return data
        kind = ActionKind(data["kind"])
        raw = data.get("params") or {}
        if isinstance(raw, BaseModel):
            raw = raw.model_dump(exclude_none=True)
        if not isinstance(raw, dict):
            raise ValueError(f"params for {kind.value} must be a mapping")
        raw = dict(raw)
        match kind:
            case ActionKind.SPEED_MOD:
                raw.setdefault("speed_factor", 1.0)
            case ActionKind.PITCH_MOD:
                raw.setdefault("pitch_semitones", 0.0)
            case ActionKind.VOLUME_ADJUST:
                has_gain = raw.get("gain_db") is not None
                has_target = raw.get("target_rms") is not None
                if has_gain and has_target:
                    raise ValueError("volume_adjust takes exactly one of gain_db / target_rms")
                if not has_gain and not has_target:
                    raw["gain_db"] = 0.0
        return {**data, "kind": kind, "params": params_class(kind).model_validate(raw)}

    @classmethod
    def build(cls, kind: ActionKind | str, rationale: str = "", **params: Any) -> "EditAction":
        return cls.model_validate({"kind": kind, "params": params, "rationale": rationale})

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "EditAction":
        return cls.model_validate(data)

    def params_map(self) -> dict[str, Any]:
        return self.params.model_dump(mode="json", exclude_none=True)

    def to_canonical(self, with_rationale: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value, "params": self.params_map()}
        if with_rationale and self.rationale:
            out["rationale"] = self.rationale
        return out

    def signature(self) -> str:
        return canonical_json(self.to_canonical(with_rationale=False))


class CaptionSource(str, Enum):
    BUILTIN = "builtin"
    REMOTE = "remote"


class Caption(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str = Field(min_length=1)
    features: dict[str, Any] = Field(default_factory=dict)
    source: CaptionSource = CaptionSource.BUILTIN

    @model_validator(mode="after")
    def _builtin_features_finite(self) -> "Caption":
        if self.source == CaptionSource.BUILTIN:
            if not self.features:
                raise ValueError("builtin captions carry their feature map")
            for name, value in self.features.items():
                if isinstance(value, float) and not math.isfinite(value):
                    raise ValueError(f"feature {name} is not finite")
        return self


class ReflectionScores(BaseModel):
    model_config = ConfigDict(frozen=True)

    alignment: float = Field(ge=0.0, le=1.0)
    temporal: float = Field(ge=0.0, le=1.0)
    # zero-variance envelope or activity; temporal pinned to 0.5
    temporal_degenerate: bool = False
    # no class profile matched the labels; alignment came from the envelope
    alignment_fallback: bool = False

    @property
    def min_score(self) -> float:
        return min(self.alignment, self.temporal)


class VideoFeatureSeries(BaseModel):
    """Per-frame visual activity standing in for the decoded video stream"""

    model_config = ConfigDict(frozen=True)

    frame_rate_hz: float = Field(gt=0)
    activity: list[float] = Field(min_length=1)
    labels: list[str] = Field(default_factory=list)
    description_hint: Optional[str] = None

    @field_validator("activity")
    @classmethod
    def _activity_finite_non_negative(cls, values: list[float]) -> list[float]:
        for i, value in enumerate(values):
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"activity[{i}] must be finite and >= 0, got {value}")
        return values

    @property
    def duration_s(self) -> float:
        return len(self.activity) / self.frame_rate_hz


class GapSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    start_s: float = Field(ge=0)
    dur_s: float = Field(gt=0)


class CorruptionSpec(BaseModel):
    """Ground-truth corruption applied to a synthetic pair"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    noise_snr_db: Optional[float] = None
    # positive = audio delayed
    offset_s: Optional[float] = None
    speed_factor: Optional[float] = Field(default=None, ge=0.5, le=2.0)
    gap: Optional[GapSpec] = None
    gain_db: Optional[float] = Field(default=None, ge=-30, le=30)
    seed: int = 0

    @model_validator(mode="after")
    def _at_least_one(self) -> "CorruptionSpec":
        if not self.kinds():
            raise ValueError("corruption spec sets no field")
        return self

    def kinds(self) -> list[str]:
        names = ("noise_snr_db", "offset_s", "speed_factor", "gap", "gain_db")
        return [name for name in names if getattr(self, name) is not None]

    @property
    def corruption_class(self) -> str:
        kinds = self.kinds()
        return kinds[0] if len(kinds) == 1 else "+".join(kinds)


class CorruptionDistribution(BaseModel):
    """Sampling ranges per corruption field; unset fields are never corrupted"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    noise_snr_db: Optional[tuple[float, float]] = None
    offset_s: Optional[tuple[float, float]] = None
    speed_factor: Optional[tuple[float, float]] = None
    gap_dur_s: Optional[tuple[float, float]] = None
    gain_db: Optional[tuple[float, float]] = None
    # one field per pair (single-corruption corpus) or every configured field at once
    single_field: bool = True

    @property
    def is_empty(self) -> bool:
        return not self.fields()

    def fields(self) -> list[str]:
        names = ("noise_snr_db", "offset_s", "speed_factor", "gap_dur_s", "gain_db")
        return [name for name in names if getattr(self, name) is not None]


class Provenance(str, Enum):
    ORIGINAL = "original"
    SYNTHETIC = "synthetic"


class AVPairRecord(BaseModel):
    """One manifest line; unknown fields are carried through untouched"""

    model_config = ConfigDict(extra="allow")

    pair_id: str = Field(min_length=1)
    audio_path: str = Field(min_length=1)
    video_features: VideoFeatureSeries
    ground_truth: Optional[CorruptionSpec] = None
    provenance: Provenance = Provenance.ORIGINAL

    def to_canonical(self) -> dict[str, Any]:
        return self.model_dump(mode="json", exclude_none=True)


class PlannerKind(str, Enum):
    RULE = "rule"
    RANDOM = "random"
    REMOTE = "remote"


class ActionPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    actions: list[EditAction] = Field(min_length=1, max_length=2)
    planner_kind: PlannerKind
    rationale: str = ""

    @model_validator(mode="after")
    def _noise_then_coordination(self) -> "ActionPlan":
        noise = [a for a in self.actions if a.kind.is_noise_filter]
        if len(noise) > 1 or len(self.actions) - len(noise) > 1:
            raise ValueError("a plan holds at most one noise filter and one coordination action")
        if len(self.actions) == 2 and not self.actions[0].kind.is_noise_filter:
            raise ValueError("noise filtering precedes coordination")
        return self

    def signature(self) -> str:
        return canonical_json([action.to_canonical(with_rationale=False) for action in self.actions])

    @property
    def is_noop(self) -> bool:
        if len(self.actions) != 1:
            return False
        action = self.actions[0]
        return (
            action.kind == ActionKind.VOLUME_ADJUST
            and isinstance(action.params, CoordParams)
            and action.params.target_rms is None
            and action.params.gain_db == 0.0
        )

    def kinds(self) -> list[str]:
        return [action.kind.value for action in self.actions]


class PlanContext(BaseModel):
    """Everything a planner sees for one cycle"""

    model_config = ConfigDict(frozen=True)

    audio_caption: Caption
    video_caption: Caption
    feedback: Optional[ReflectionScores] = None
    cycle_index: int = Field(default=0, ge=0)
    history: list[ActionPlan] = Field(default_factory=list)
    pair_id: str = ""

    @model_validator(mode="after")
    def _feedback_iff_later_cycle(self) -> "PlanContext":
        if (self.feedback is None) != (self.cycle_index == 0):
            raise ValueError("feedback is present exactly when cycle_index > 0")
        return self

    def tried(self) -> set[str]:
        return {plan.signature() for plan in self.history}


class RevertPolicy(str, Enum):
    ORIGINAL_ON_NO_IMPROVE = "original_on_no_improve"
    CHAIN = "chain"


class AcceptanceRule(str, Enum):
    MIN_SCORE = "min_score"
    BOTH_IMPROVED = "both_improved"


class BackendChoice(str, Enum):
    BUILTIN = "builtin"
    REMOTE = "remote"


class ScorerChoice(str, Enum):
    PROXY = "proxy"
    REMOTE = "remote"


class WorkflowConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    threshold: float = Field(default=0.85, gt=0, le=1)
    max_cycles: int = Field(default=5, ge=1)
    improvement_epsilon: float = Field(default=0.01, ge=0)
    revert_policy: RevertPolicy = RevertPolicy.ORIGINAL_ON_NO_IMPROVE
    acceptance_rule: AcceptanceRule = AcceptanceRule.MIN_SCORE
    planner: PlannerKind = PlannerKind.RULE
    captioner: BackendChoice = BackendChoice.BUILTIN
    scorer: ScorerChoice = ScorerChoice.PROXY
    seed: int = 0


class Decision(str, Enum):
    ACCEPTED = "accepted"
    REVERTED = "reverted"


class TerminalReason(str, Enum):
    THRESHOLD_MET = "threshold_met"
    BUDGET_EXHAUSTED = "budget_exhausted"
    PLANNER_EXHAUSTED = "planner_exhausted"
    ERROR = "error"


class CycleRecord(BaseModel):
    cycle_index: int
    audio_caption: Caption
    video_caption: Caption
    plan: ActionPlan
    scores_before: ReflectionScores
    scores_after: ReflectionScores
    decision: Decision
    audio_hash: str


class WorkflowTrace(BaseModel):
    pair_id: str
    baseline_scores: Optional[ReflectionScores] = None
    cycles: list[CycleRecord] = Field(default_factory=list)
    final_scores: Optional[ReflectionScores] = None
    terminal_reason: TerminalReason
    final_audio_hash: Optional[str] = None
    error: Optional[str] = None

    def to_canonical(self) -> dict[str, Any]:
        return self.model_dump(mode="json", exclude_none=True)

    @property
    def accepted_plans(self) -> list[ActionPlan]:
        return [cycle.plan for cycle in self.cycles if cycle.decision == Decision.ACCEPTED]


class BatchReport(BaseModel):
    n_pairs: int = 0
    n_completed: int = 0
    n_errored: int = 0
    mean_baseline_min: float = 0.0
    mean_final_min: float = 0.0
    mean_delta_min: float = 0.0
    mean_delta_alignment: float = 0.0
    mean_delta_temporal: float = 0.0
    action_histogram: dict[str, int] = Field(default_factory=dict)
    accepted_histogram: dict[str, int] = Field(default_factory=dict)
    terminal_reasons: dict[str, int] = Field(default_factory=dict)
    errors: dict[str, str] = Field(default_factory=dict)


class MixtureStudyConfig(BaseModel):
    """Unit counts of true (aligned) and false (original) pairs plus the cell grid built from them"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_true: int = Field(default=50, ge=0)
    n_false: int = Field(default=50, ge=0)
    scorer: ScorerChoice = ScorerChoice.PROXY
    seed: int = 0
    grid: Optional[list[tuple[int, int]]] = None

    @model_validator(mode="after")
    def _non_empty(self) -> "MixtureStudyConfig":
        if self.n_true + self.n_false < 1:
            raise ValueError("n_true + n_false must be at least 1")
        return self

    def cells(self) -> list[tuple[int, int]]:
        if self.grid is not None:
            return list(self.grid)
        t, f = self.n_true, self.n_false
        return [(t, 0), (0, f), (t, f), (t, 2 * f), (2 * t, f)]


class MixtureCell(BaseModel):
    n_true: int
    n_false: int
    mean_alignment: float
    mean_temporal: float


class ArmSummary(BaseModel):
    name: str
    planner: PlannerKind
    mean_baseline_min: float
    mean_final_alignment: float
    mean_final_temporal: float
    mean_final_min: float
    n_errored: int = 0


class AblationReport(BaseModel):
    n_pairs: int
    seeds: list[int]
    arms: list[ArmSummary]
    mean_delta: float
    win_rate: float
    per_seed_win_rate: list[float] = Field(default_factory=list)


class RecoveryRow(BaseModel):
    corruption_class: str
    n_pairs: int
    mean_clean: float
    mean_corrupted: float
    mean_agent: float
    mean_oracle: float
    agent_recovery: float
    oracle_recovery: float
    threshold: float
    passed: bool
