"""The caption -> score -> (plan -> edit -> re-score) loop and its batch driver."""

import hashlib
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from avalign.actions import apply_plan
from avalign.audio import AudioBuffer, read_wav, write_wav
from avalign.backend import BackendClient, BackendEndpoint
from avalign.captioning import BuiltinCaptioner, Captioner, CaptionSettings, RemoteCaptioner
from avalign.errors import AvalignError, ConfigError, DuplicatePairId
from avalign.models import (
    AcceptanceRule,
    AVPairRecord,
    BackendChoice,
    BatchReport,
    CycleRecord,
    Decision,
    PlanContext,
    PlannerKind,
    ReflectionScores,
    RevertPolicy,
    ScorerChoice,
    StftConfig,
    TerminalReason,
    VideoFeatureSeries,
    WorkflowConfig,
    WorkflowTrace,
    canonical_json,
)
from avalign.planning import Planner, RandomPlanner, RemotePlanner, RulePlanner, RuleTable, derive_seed
from avalign.reflection import ClassProfiles, ScorerKind, reflect

logger = logging.getLogger(__name__)


def audio_hash(audio: AudioBuffer) -> str:
    return hashlib.sha256(audio.samples.tobytes()).hexdigest()[:16]


@dataclass
class WorkflowRunner:
    cfg: WorkflowConfig
    captioner: Captioner
    planner: Planner
    scorer: ScorerKind
    stft: StftConfig

    def meets_threshold(self, scores: ReflectionScores) -> bool:
        return scores.min_score >= self.cfg.threshold

    def improved(self, best: ReflectionScores, candidate: ReflectionScores) -> bool:
        eps = self.cfg.improvement_epsilon
        match self.cfg.acceptance_rule:
            case AcceptanceRule.BOTH_IMPROVED:
                return candidate.alignment - best.alignment >= eps and candidate.temporal - best.temporal >= eps
            case _:
                return candidate.min_score - best.min_score >= eps

    def run(self, pair_id: str, original: AudioBuffer, video: VideoFeatureSeries) -> tuple[AudioBuffer, WorkflowTrace]:
        audio_caption = self.captioner.caption_audio(original)
        video_caption = self.captioner.caption_video(video)
        baseline = reflect(original, video, self.scorer)
        logger.info(
            f"Pair {pair_id}: baseline alignment {baseline.alignment:.3f}, temporal {baseline.temporal:.3f}"
        )

        best_audio, best_scores = original, baseline
        cycles: list[CycleRecord] = []
        history = []
        feedback: Optional[ReflectionScores] = None
        reason = TerminalReason.BUDGET_EXHAUSTED
        if self.meets_threshold(baseline):
            reason = TerminalReason.THRESHOLD_MET

        for cycle in range(self.cfg.max_cycles if reason != TerminalReason.THRESHOLD_MET else 0):
            ctx = PlanContext(
                audio_caption=audio_caption,
                video_caption=video_caption,
                feedback=feedback,
                cycle_index=cycle,
                history=history,
                pair_id=pair_id,
            )
            plan = self.planner.plan(ctx)
            if plan.signature() in ctx.tried():
                logger.info(f"Pair {pair_id}: planner repeated {plan.kinds()} at cycle {cycle}, stopping")
                reason = TerminalReason.PLANNER_EXHAUSTED
                break

            source = best_audio if self.cfg.revert_policy == RevertPolicy.CHAIN else original
            seed = derive_seed(self.cfg.seed, f"{pair_id}/edit", cycle)
            candidate = apply_plan(source, plan, seed=seed, cfg=self.stft)
            after = reflect(candidate, video, self.scorer)
            accepted = self.improved(best_scores, after)
            cycles.append(
                CycleRecord(
                    cycle_index=cycle,
                    audio_caption=audio_caption,
                    video_caption=video_caption,
                    plan=plan,
                    scores_before=best_scores,
                    scores_after=after,
                    decision=Decision.ACCEPTED if accepted else Decision.REVERTED,
                    audio_hash=audio_hash(candidate),
                )
            )
            history = [*history, plan]
            feedback = after
            logger.info(
                f"Pair {pair_id}: cycle {cycle} {plan.kinds()} -> min score {after.min_score:.3f} "
                f"({'accepted' if accepted else 'reverted'}, best {best_scores.min_score:.3f})"
            )
            if accepted:
                best_audio, best_scores = candidate, after
                if self.cfg.revert_policy == RevertPolicy.CHAIN:
                    audio_caption = self.captioner.caption_audio(best_audio)
            if self.meets_threshold(best_scores):
                reason = TerminalReason.THRESHOLD_MET
                break

        trace = WorkflowTrace(
            pair_id=pair_id,
            baseline_scores=baseline,
            cycles=cycles,
            final_scores=best_scores,
            terminal_reason=reason,
            final_audio_hash=audio_hash(best_audio),
        )
        return best_audio, trace


def make_runner(
    cfg: WorkflowConfig,
    stft: Optional[StftConfig] = None,
    captions: Optional[CaptionSettings] = None,
    rules: Optional[RuleTable] = None,
    profiles: Optional[ClassProfiles] = None,
    endpoint: Optional[BackendEndpoint] = None,
    client: Optional[BackendClient] = None,
    planner: Optional[Planner] = None,
) -> WorkflowRunner:
    """Wire captioner, planner and scorer for a config; remote choices need an endpoint"""
    stft = stft or StftConfig()
    profiles = profiles or ClassProfiles.load()
    remote_needed = (
        cfg.captioner == BackendChoice.REMOTE or cfg.scorer == ScorerChoice.REMOTE or cfg.planner == PlannerKind.REMOTE
    )
    if remote_needed and endpoint is None:
        raise ConfigError("a remote captioner, planner or scorer needs a backend endpoint (AVALIGN_BACKEND_URL)")
    if remote_needed and client is None and endpoint is not None:
        client = BackendClient(endpoint)

    captioner: Captioner = BuiltinCaptioner(captions, stft)
    if cfg.captioner == BackendChoice.REMOTE and endpoint is not None and client is not None:
        captioner = RemoteCaptioner(endpoint, client, captions, stft)

    if planner is None:
        match cfg.planner:
            case PlannerKind.RANDOM:
                planner = RandomPlanner(cfg.seed)
            case PlannerKind.REMOTE if endpoint is not None and client is not None:
                planner = RemotePlanner(endpoint, client, rules, profiles)
            case _:
                planner = RulePlanner(rules, profiles)

    scorer = ScorerKind(kind=cfg.scorer, class_profiles=profiles, stft=stft, endpoint=endpoint, client=client)
    return WorkflowRunner(cfg=cfg, captioner=captioner, planner=planner, scorer=scorer, stft=stft)


def run_pair(
    pair: AVPairRecord, cfg: WorkflowConfig, root: Path = Path("."), runner: Optional[WorkflowRunner] = None
) -> tuple[AudioBuffer, WorkflowTrace]:
    """Align one pair; module errors propagate"""
    runner = runner or make_runner(cfg)
    audio = read_wav(Path(root) / pair.audio_path)
    return runner.run(pair.pair_id, audio, pair.video_features)


def run_pair_safe(
    pair: AVPairRecord, runner: WorkflowRunner, root: Path
) -> tuple[Optional[AudioBuffer], WorkflowTrace]:
    """Align one pair; any pipeline error becomes an error trace"""
    try:
        return run_pair(pair, runner.cfg, root, runner)
    except (AvalignError, OSError, ValidationError) as e:
        logger.error(f"Pair {pair.pair_id} failed: {e}")
        return None, WorkflowTrace(pair_id=pair.pair_id, terminal_reason=TerminalReason.ERROR, error=str(e))


def output_audio_name(pair_key: str) -> str:
    """Filesystem-safe name; ids that needed rewriting carry a digest of the original id"""
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in pair_key)
    if safe != pair_key:
        safe = f"{safe}-{hashlib.sha256(pair_key.encode()).hexdigest()[:8]}"
    return f"audio/{safe}.wav"


def _process(
    runner: WorkflowRunner, root: Path, out_dir: Path, pair: AVPairRecord
) -> tuple[AVPairRecord, WorkflowTrace, Optional[str]]:
    audio, trace = run_pair_safe(pair, runner, root)
    if audio is None:
        return pair, trace, None
    relative = output_audio_name(pair.pair_id)
    try:
        write_wav(audio, out_dir / relative)
    except (OSError, RuntimeError) as e:
        logger.error(f"Pair {pair.pair_id}: writing aligned audio failed: {e}")
        return pair, trace.model_copy(update={"terminal_reason": TerminalReason.ERROR, "error": str(e)}), None
    return pair, trace, relative


def summarize(traces: list[WorkflowTrace]) -> BatchReport:
    done = [t for t in traces if t.terminal_reason != TerminalReason.ERROR and t.baseline_scores and t.final_scores]
    planned: Counter[str] = Counter()
    accepted: Counter[str] = Counter()
    for trace in traces:
        for cycle in trace.cycles:
            planned.update(cycle.plan.kinds())
            if cycle.decision == Decision.ACCEPTED:
                accepted.update(cycle.plan.kinds())
    reasons = Counter(t.terminal_reason.value for t in traces)

    def mean(values: list[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    baseline = [t.baseline_scores for t in done if t.baseline_scores]
    final = [t.final_scores for t in done if t.final_scores]
    return BatchReport(
        n_pairs=len(traces),
        n_completed=len(done),
        n_errored=len(traces) - len(done),
        mean_baseline_min=mean([s.min_score for s in baseline]),
        mean_final_min=mean([s.min_score for s in final]),
        mean_delta_min=mean([f.min_score - b.min_score for b, f in zip(baseline, final, strict=True)]),
        mean_delta_alignment=mean([f.alignment - b.alignment for b, f in zip(baseline, final, strict=True)]),
        mean_delta_temporal=mean([f.temporal - b.temporal for b, f in zip(baseline, final, strict=True)]),
        action_histogram=dict(sorted(planned.items())),
        accepted_histogram=dict(sorted(accepted.items())),
        terminal_reasons=dict(sorted(reasons.items())),
        errors={t.pair_id: t.error or "" for t in traces if t.terminal_reason == TerminalReason.ERROR},
    )


def render_report(report: BatchReport) -> str:
    lines = [
        f"pairs        {report.n_pairs}",
        f"completed    {report.n_completed}",
        f"errored      {report.n_errored}",
        f"baseline min {report.mean_baseline_min:.4f}",
        f"final min    {report.mean_final_min:.4f}",
        f"delta min    {report.mean_delta_min:+.4f}",
        f"delta align  {report.mean_delta_alignment:+.4f}",
        f"delta tempo  {report.mean_delta_temporal:+.4f}",
        "actions tried / accepted:",
    ]
    for kind, count in report.action_histogram.items():
        lines.append(f"  {kind:<22}{count:>6}{report.accepted_histogram.get(kind, 0):>6}")
    lines.append("terminal reasons:")
    for reason, count in report.terminal_reasons.items():
        lines.append(f"  {reason:<22}{count:>6}")
    for key, message in report.errors.items():
        lines.append(f"error {key}: {message}")
    return "\n".join(lines) + "\n"


def read_traces(path: Path) -> list[WorkflowTrace]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [WorkflowTrace.model_validate_json(line) for line in lines if line.strip()]


def run_batch(
    records: list[AVPairRecord],
    runner: WorkflowRunner,
    out_dir: Path,
    root: Path = Path("."),
    parallelism: int = 1,
) -> BatchReport:
    """Align every pair with bounded parallelism; outputs are ordered by pair_id whatever the parallelism"""
    seen: set[str] = set()
    names: dict[str, str] = {}
    for record in records:
        if record.pair_id in seen:
            raise DuplicatePairId(f"pair_id {record.pair_id!r} appears more than once")
        seen.add(record.pair_id)
        name = output_audio_name(record.pair_id)
        if name in names:
            raise DuplicatePairId(f"pair_ids {names[name]!r} and {record.pair_id!r} share the output {name}")
        names[name] = record.pair_id

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(records, key=lambda r: r.pair_id)
    work = partial(_process, runner, Path(root), out_dir)
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(pool.map(work, ordered))

    traces = [trace for _, trace, _ in results]
    outputs = []
    for record, trace, relative in results:
        if relative is None:
            continue
        data = record.to_canonical()
        data.update({"audio_path": relative, "trace_ref": f"traces.jsonl#{trace.pair_id}"})
        outputs.append(AVPairRecord.model_validate(data))

    (out_dir / "traces.jsonl").write_text(
        "".join(canonical_json(t.to_canonical()) + "\n" for t in traces), encoding="utf-8"
    )
    (out_dir / "manifest.jsonl").write_text(
        "".join(canonical_json(r.to_canonical()) + "\n" for r in outputs), encoding="utf-8"
    )
    report = summarize(traces)
    (out_dir / "report.json").write_text(canonical_json(report.model_dump(mode="json")) + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(render_report(report), encoding="utf-8")
    logger.info(
        f"Batch of {report.n_pairs} pairs: {report.n_completed} completed, {report.n_errored} errored, "
        f"mean min score {report.mean_baseline_min:.3f} -> {report.mean_final_min:.3f}"
    )
    return report
