"""Planners mapping the two captions plus feedback to an ordered one- or two-action plan.

The rule planner ranks noise-filter candidates and coordination candidates separately and walks
their combinations best-first, skipping any plan already tried for the pair.
"""

import logging
import math
import zlib
from typing import Any, Optional, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from avalign.backend import BackendClient, BackendEndpoint, FallbackMode
from avalign.errors import BackendError, IllegalAction, MissingFeatures, UnparseablePlan
from avalign.models import (
    NOISE_FILTER_KINDS,
    ActionKind,
    ActionPlan,
    EditAction,
    FillMode,
    PlanContext,
    PlannerKind,
    WaveletName,
)
from avalign.reflection import ClassProfiles

logger = logging.getLogger(__name__)

AUDIO_FEATURES = ("snr_estimate_db", "silence_ratio", "dominant_band_hz", "tempo_bpm_estimate", "clipping_ratio", "rms")
VIDEO_FEATURES = ("activity_mean", "activity_peak_rate", "labels")
COORDINATION_KINDS = tuple(kind for kind in ActionKind if kind not in NOISE_FILTER_KINDS)
NOISE_KINDS = tuple(kind for kind in ActionKind if kind in NOISE_FILTER_KINDS)


class RuleTable(BaseModel):
    """Thresholds of the rule planner"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    snr_db: float = 10.0
    clipping_ratio: float = Field(default=0.01, ge=0)
    silence_ratio: float = Field(default=0.2, ge=0, le=1)
    video_active: float = Field(default=0.05, ge=0)
    rate_mismatch: float = Field(default=0.15, gt=0)
    rms_low: float = Field(default=0.03, gt=0)
    rms_high: float = Field(default=0.5, gt=0)
    target_rms: float = Field(default=0.1, gt=0, le=1)
    pitch_mismatch_semitones: float = Field(default=2.0, gt=0)


def noop_plan(rationale: str = "nothing notable to correct") -> ActionPlan:
    return ActionPlan(
        actions=[EditAction.build(ActionKind.VOLUME_ADJUST, rationale=rationale, gain_db=0.0)],
        planner_kind=PlannerKind.RULE,
        rationale=rationale,
    )


def _features(ctx: PlanContext) -> tuple[dict[str, Any], dict[str, Any]]:
    audio, video = ctx.audio_caption.features, ctx.video_caption.features
    missing = [name for name in AUDIO_FEATURES if name not in audio] + [
        name for name in VIDEO_FEATURES if name not in video
    ]
    if missing:
        raise MissingFeatures(f"rule planner needs caption features {missing}")
    return audio, video


def _clamp_speed(factor: float) -> float:
    return round(min(2.0, max(0.5, factor)), 3)


def noise_candidates(audio: dict[str, Any], rules: RuleTable) -> list[EditAction]:
    snr = float(audio["snr_estimate_db"])
    if snr >= rules.snr_db:
        return []
    why = f"estimated SNR {snr:.1f} dB below {rules.snr_db:g} dB"
    if float(audio["clipping_ratio"]) > rules.clipping_ratio:
        order = [ActionKind.SPECTRAL_SUBTRACTION, ActionKind.WIENER_FILTER]
        why += " with clipping"
    else:
        order = [ActionKind.WIENER_FILTER, ActionKind.SPECTRAL_SUBTRACTION]
    order += [ActionKind.SPECTRAL_GATE, ActionKind.WAVELET_DENOISE]
    return [EditAction.build(kind, rationale=why) for kind in order]


def coordination_candidates(
    audio: dict[str, Any], video: dict[str, Any], rules: RuleTable, profiles: Optional[ClassProfiles]
) -> list[EditAction]:
    out: list[EditAction] = []

    silence = float(audio["silence_ratio"])
    if silence > rules.silence_ratio and float(video["activity_mean"]) >= rules.video_active:
        out.append(
            EditAction.build(
                ActionKind.FILL_BLANKS,
                rationale=f"{100 * silence:.0f}% silent audio against an active scene",
                fill_mode=FillMode.CONTEXT_NOISE,
            )
        )

    audio_duration = float(audio.get("duration_s", 0.0))
    video_duration = float(video.get("duration_s", 0.0))
    if audio_duration > 0 and video_duration > 0 and abs(audio_duration / video_duration - 1) > rules.rate_mismatch:
        factor = _clamp_speed(audio_duration / video_duration)
        out.append(
            EditAction.build(
                ActionKind.SPEED_MOD,
                rationale=f"audio lasts {audio_duration:.2f}s against {video_duration:.2f}s of video",
                speed_factor=factor,
            )
        )

    audio_rate = float(audio["tempo_bpm_estimate"]) / 60.0
    video_rate = float(video["activity_peak_rate"])
    if audio_rate > 0 and video_rate > 0 and abs(audio_rate / video_rate - 1) > rules.rate_mismatch:
        factor = _clamp_speed(video_rate / audio_rate)
        if factor != 1.0 and all(a.kind != ActionKind.SPEED_MOD for a in out):
            out.append(
                EditAction.build(
                    ActionKind.SPEED_MOD,
                    rationale=f"audio pulses at {audio_rate:.2f}/s, video at {video_rate:.2f}/s",
                    speed_factor=factor,
                )
            )

    rms = float(audio["rms"])
    if rms > 0 and not rules.rms_low <= rms <= rules.rms_high:
        out.append(
            EditAction.build(
                ActionKind.VOLUME_ADJUST,
                rationale=f"RMS {rms:.3f} outside [{rules.rms_low:g}, {rules.rms_high:g}]",
                target_rms=rules.target_rms,
            )
        )

    centroid = float(audio["dominant_band_hz"])
    if profiles is not None and centroid > 0 and float(audio["snr_estimate_db"]) >= rules.snr_db:
        matched = profiles.resolve_all([str(label) for label in video["labels"]])
        if matched:
            expected = matched[0].centroid_hz()
            semitones = 12 * math.log2(expected / centroid)
            if abs(semitones) > rules.pitch_mismatch_semitones:
                out.append(
                    EditAction.build(
                        ActionKind.PITCH_MOD,
                        rationale=f"centroid {centroid:.0f} Hz against {expected:.0f} Hz expected for {matched[0].name}",
                        pitch_semitones=round(max(-12.0, min(12.0, semitones)), 2),
                    )
                )
    return out


def _ranked(options: list[EditAction]) -> list[tuple[int, Optional[EditAction]]]:
    """Candidates with their rank; leaving the slot empty ranks right after the best candidate"""
    ranked: list[tuple[int, Optional[EditAction]]] = [(0, None)] if not options else [(0, options[0]), (1, None)]
    ranked += [(rank + 1, option) for rank, option in enumerate(options[1:], start=1)]
    return ranked


def candidate_plans(noise: list[EditAction], coordination: list[EditAction]) -> list[list[EditAction]]:
    combos = []
    for noise_rank, noise_action in _ranked(noise):
        for coord_rank, coord_action in _ranked(coordination):
            actions = [a for a in (noise_action, coord_action) if a is not None]
            if actions:
                combos.append((noise_rank + coord_rank, noise_rank, actions))
    combos.sort(key=lambda item: (item[0], item[1]))
    return [actions for _, _, actions in combos]


def plan_rule(
    ctx: PlanContext, rules: Optional[RuleTable] = None, profiles: Optional[ClassProfiles] = None
) -> ActionPlan:
    rules = rules or RuleTable()
    audio, video = _features(ctx)
    noise = noise_candidates(audio, rules)
    coordination = coordination_candidates(audio, video, rules, profiles)
    tried = ctx.tried()
    for actions in candidate_plans(noise, coordination):
        plan = ActionPlan(
            actions=actions,
            planner_kind=PlannerKind.RULE,
            rationale="; ".join(action.rationale for action in actions),
        )
        if plan.signature() not in tried:
            return plan
    if noise or coordination:
        logger.debug(f"Pair {ctx.pair_id}: every rule-table alternative already tried")
        return noop_plan("every rule-table alternative already tried")
    return noop_plan()


def _random_action(kind: ActionKind, rng: np.random.Generator) -> EditAction:
    def uniform(low: float, high: float) -> float:
        return round(float(rng.uniform(low, high)), 4)

    rationale = "random baseline"
    match kind:
        case ActionKind.SPECTRAL_SUBTRACTION | ActionKind.WIENER_FILTER | ActionKind.SPECTRAL_GATE:
            return EditAction.build(
                kind,
                rationale=rationale,
                noise_percentile=uniform(1.0, 50.0),
                oversubtraction=uniform(1.0, 3.0),
                floor_db=uniform(-60.0, -10.0),
                gate_threshold_db=uniform(-60.0, -10.0),
                gate_attack_ms=uniform(0.0, 50.0),
                gate_release_ms=uniform(0.0, 200.0),
            )
        case ActionKind.WAVELET_DENOISE:
            return EditAction.build(
                kind,
                rationale=rationale,
                wavelet=list(WaveletName)[int(rng.integers(0, len(WaveletName)))],
                levels=int(rng.integers(1, 9)),
                threshold_scale=uniform(0.5, 2.0),
            )
        case ActionKind.SPEED_MOD:
            return EditAction.build(kind, rationale=rationale, speed_factor=uniform(0.5, 2.0))
        case ActionKind.PITCH_MOD:
            return EditAction.build(kind, rationale=rationale, pitch_semitones=uniform(-12.0, 12.0))
        case ActionKind.VOLUME_ADJUST:
            return EditAction.build(kind, rationale=rationale, gain_db=uniform(-30.0, 30.0))
        case ActionKind.FILL_BLANKS:
            return EditAction.build(
                kind,
                rationale=rationale,
                blank_min_ms=uniform(20.0, 500.0),
                fill_mode=list(FillMode)[int(rng.integers(0, len(FillMode)))],
            )
        case _:
            raise IllegalAction(f"unknown action kind {kind}")


def plan_random(ctx: PlanContext, seed: int) -> ActionPlan:
    """One action drawn from all eight, or a noise filter followed by a coordination edit"""
    rng = np.random.default_rng(seed)
    if int(rng.integers(1, 3)) == 1:
        kinds = [list(ActionKind)[int(rng.integers(0, len(ActionKind)))]]
    else:
        kinds = [
            NOISE_KINDS[int(rng.integers(0, len(NOISE_KINDS)))],
            COORDINATION_KINDS[int(rng.integers(0, len(COORDINATION_KINDS)))],
        ]
    actions = [_random_action(kind, rng) for kind in kinds]
    return ActionPlan(actions=actions, planner_kind=PlannerKind.RANDOM, rationale=f"random actions (seed {seed})")


def _parse_remote_plan(data: dict[str, Any]) -> ActionPlan:
    raw = data.get("actions")
    if not isinstance(raw, list) or not 1 <= len(raw) <= 2:
        raise UnparseablePlan(f"expected a list of 1-2 actions, got {raw!r}")
    actions = []
    for item in raw:
        if not isinstance(item, dict) or not isinstance(item.get("kind"), str):
            raise UnparseablePlan(f"action entry {item!r} has no kind")
        if item["kind"] not in {kind.value for kind in ActionKind}:
            raise IllegalAction(f"{item['kind']!r} is not one of the eight actions")
        try:
            actions.append(EditAction.from_mapping(item))
        except ValidationError as e:
            logger.warning(f"Rejected remote action {item['kind']}: {e.error_count()} invalid parameter(s)")
            raise IllegalAction(f"{item['kind']} parameters rejected: {e}") from e
    try:
        return ActionPlan(actions=actions, planner_kind=PlannerKind.REMOTE, rationale=str(data.get("text") or ""))
    except ValidationError as e:
        logger.warning(f"Rejected remote plan structure {[a.kind.value for a in actions]}")
        raise IllegalAction(f"plan structure rejected: {e}") from e


def plan_remote(
    ctx: PlanContext,
    endpoint: BackendEndpoint,
    client: Optional[BackendClient] = None,
    rules: Optional[RuleTable] = None,
    profiles: Optional[ClassProfiles] = None,
) -> ActionPlan:
    """Plan through the backend; strict closed-vocabulary parse of the reply"""
    payload = {
        "audio_caption": ctx.audio_caption.model_dump(mode="json"),
        "video_caption": ctx.video_caption.model_dump(mode="json"),
        "feedback": ctx.feedback.model_dump(mode="json") if ctx.feedback else None,
        "cycle_index": ctx.cycle_index,
        "history": [plan.signature() for plan in ctx.history],
        "vocabulary": [kind.value for kind in ActionKind],
    }
    owned = client is None
    active = client or BackendClient(endpoint)
    try:
        data = active.post("plan", "text", payload, context={"pair_id": ctx.pair_id})
    except BackendError as e:
        if endpoint.fallback != FallbackMode.BUILTIN:
            raise
        logger.warning(f"Pair {ctx.pair_id}: remote planner failed, using rule table: {e}")
        return plan_rule(ctx, rules, profiles)
    finally:
        if owned:
            active.close()
    return _parse_remote_plan(data)


def derive_seed(seed: int, key: str, index: int) -> int:
    """Independent, reproducible stream per (seed, pair, cycle)"""
    mixed = zlib.crc32(bytes(key, "utf-8"))
    return int(np.random.SeedSequence([seed, mixed, index]).generate_state(1)[0])


class Planner(Protocol):
    kind: PlannerKind

    def plan(self, ctx: PlanContext) -> ActionPlan: ...


class RulePlanner:
    kind = PlannerKind.RULE

    def __init__(self, rules: Optional[RuleTable] = None, profiles: Optional[ClassProfiles] = None):
        self.rules = rules or RuleTable()
        self.profiles = profiles

    def plan(self, ctx: PlanContext) -> ActionPlan:
        return plan_rule(ctx, self.rules, self.profiles)


class RandomPlanner:
    """Random baseline; each (pair, cycle) draws from its own seed"""

    kind = PlannerKind.RANDOM

    def __init__(self, seed: int = 0):
        self.seed = seed

    def plan(self, ctx: PlanContext) -> ActionPlan:
        return plan_random(ctx, derive_seed(self.seed, ctx.pair_id, ctx.cycle_index))


class RemotePlanner:
    kind = PlannerKind.REMOTE

    def __init__(
        self,
        endpoint: BackendEndpoint,
        client: BackendClient,
        rules: Optional[RuleTable] = None,
        profiles: Optional[ClassProfiles] = None,
    ):
        self.endpoint = endpoint
        self.client = client
        self.rules = rules
        self.profiles = profiles

    def plan(self, ctx: PlanContext) -> ActionPlan:
        return plan_remote(ctx, self.endpoint, self.client, self.rules, self.profiles)
