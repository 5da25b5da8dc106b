"""Manifest I/O, the synthetic corruption corpus, and the studies run over it.

Studies:
- mixture_study: mean scores of cells mixing aligned (true) and unaligned (false) pairs
- ablation_random_vs_agent: rule planner against the random-actions baseline
- recovery_study: share of the clean-to-corrupted score gap the agent wins back, next to a
  brute-force single-action oracle
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Optional

import numpy as np
import polars as pl
from pydantic import ValidationError

from avalign.actions import apply_action, speed_mod
from avalign.audio import WORKING_RATE_HZ, AudioBuffer, read_wav, write_wav
from avalign.errors import ConfigError, DuplicatePairId, InsufficientPairs, ManifestParseError, MissingAudioFile
from avalign.models import (
    AblationReport,
    ActionKind,
    ArmSummary,
    AVPairRecord,
    CoordParams,
    CorruptionDistribution,
    CorruptionSpec,
    EditAction,
    GapSpec,
    MixtureCell,
    MixtureStudyConfig,
    PlannerKind,
    Provenance,
    RecoveryRow,
    StftConfig,
    TerminalReason,
    VideoFeatureSeries,
    WorkflowConfig,
    WorkflowTrace,
    canonical_json,
)
from avalign.planning import RuleTable
from avalign.reflection import ClassProfile, ClassProfiles, ScorerKind, reflect
from avalign.workflow import make_runner, read_traces, run_batch

logger = logging.getLogger(__name__)

SYNTH_DURATION_S = 4.0
ACTIVITY_RATE_HZ = 25.0
SYNTH_RMS = 0.1
RECOVERY_TARGET = 0.7
ORACLE_SHARE = 0.9
# below this clean-to-corrupted gap a class has nothing to recover
GAP_EPS = 1e-3

DEFAULT_DISTRIBUTION = CorruptionDistribution(
    noise_snr_db=(-5.0, 10.0),
    offset_s=(0.3, 0.8),
    speed_factor=(1.25, 1.6),
    gap_dur_s=(0.9, 1.4),
    gain_db=(-24.0, -12.0),
)


# Manifest I/O
def read_manifest(path: Path) -> list[AVPairRecord]:
    """Parse a line-delimited manifest; blank lines are skipped, line numbers are 1-based"""
    records = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except ValueError as e:
            logger.error(f"Invalid JSON at {path}:{number}: {e}")
            raise ManifestParseError(number, f"invalid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ManifestParseError(number, "record is not an object")
        try:
            records.append(AVPairRecord.model_validate(data))
        except ValidationError as e:
            logger.error(f"Invalid record at {path}:{number}: {e.error_count()} errors")
            raise ManifestParseError(number, str(e)) from e
    return records


def write_manifest(records: list[AVPairRecord], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(canonical_json(r.to_canonical()) + "\n" for r in records), encoding="utf-8")
    return path


def validate_manifest(records: list[AVPairRecord], root: Path) -> None:
    """Unique pair ids and an existing audio file for every record"""
    seen: set[str] = set()
    for record in records:
        if record.pair_id in seen:
            raise DuplicatePairId(f"pair_id {record.pair_id!r} appears more than once")
        seen.add(record.pair_id)
        audio_path = Path(root) / record.audio_path
        if not audio_path.is_file():
            raise MissingAudioFile(audio_path, record.pair_id)


# Synthetic pairs
def activity_series(
    rng: np.random.Generator, duration_s: float = SYNTH_DURATION_S, rate_hz: float = ACTIVITY_RATE_HZ
) -> np.ndarray:
    """Renewal pulse train (0.3 to 0.9 s apart, 80 ms decay) over a slow drift"""
    n = round(duration_s * rate_hz)
    t = np.arange(n) / rate_hz
    series = 0.1 + 0.05 * np.sin(2 * np.pi * t / duration_s + rng.uniform(0, 2 * np.pi))
    onset = rng.uniform(0.0, 0.4)
    while onset < duration_s:
        after = t >= onset
        series[after] += rng.uniform(0.6, 1.0) * np.exp(-(t[after] - onset) / 0.08)
        onset += rng.uniform(0.3, 0.9)
    return np.clip(series, 0.0, None)


def generate_pair(
    profile: ClassProfile,
    rng: np.random.Generator,
    duration_s: float = SYNTH_DURATION_S,
    frame_rate_hz: float = ACTIVITY_RATE_HZ,
    sample_rate_hz: int = WORKING_RATE_HZ,
) -> tuple[AudioBuffer, VideoFeatureSeries]:
    """Clean pair: profile-shaped noise whose loudness follows the activity pulses"""
    activity = activity_series(rng, duration_s, frame_rate_hz)
    n = round(duration_s * sample_rate_hz)
    frame_times = (np.arange(activity.size) + 0.5) / frame_rate_hz
    envelope = np.interp(np.arange(n) / sample_rate_hz, frame_times, activity)
    samples = profile.synthesize(n, sample_rate_hz, rng) * (0.02 + envelope)
    samples *= SYNTH_RMS / float(np.sqrt(np.mean(samples**2)))
    peak = float(np.max(np.abs(samples)))
    if peak > 0.9:
        samples *= 0.9 / peak
    video = VideoFeatureSeries(
        frame_rate_hz=frame_rate_hz, activity=[round(float(v), 6) for v in activity], labels=[profile.name]
    )
    return AudioBuffer(samples, sample_rate_hz), video


def sample_corruption(
    dist: CorruptionDistribution, rng: np.random.Generator, seed: int, duration_s: float = SYNTH_DURATION_S
) -> Optional[CorruptionSpec]:
    """Draw one corruption; offsets take a random sign and speed factors are inverted half the time"""
    if dist.is_empty:
        return None
    names = dist.fields()
    if dist.single_field:
        names = [names[int(rng.integers(len(names)))]]

    def draw(bounds: tuple[float, float]) -> float:
        return round(float(rng.uniform(*bounds)), 3)

    values: dict[str, Any] = {"seed": seed}
    for name in names:
        match name:
            case "noise_snr_db" if dist.noise_snr_db:
                values["noise_snr_db"] = draw(dist.noise_snr_db)
            case "offset_s" if dist.offset_s:
                values["offset_s"] = draw(dist.offset_s) * (1 if rng.random() < 0.5 else -1)
            case "speed_factor" if dist.speed_factor:
                factor = draw(dist.speed_factor)
                inverted = round(1.0 / factor, 3)
                values["speed_factor"] = inverted if rng.random() < 0.5 and 0.5 <= inverted <= 2.0 else factor
            case "gap_dur_s" if dist.gap_dur_s:
                dur = min(draw(dist.gap_dur_s), 0.8 * duration_s)
                start = round(float(rng.uniform(0.1 * duration_s, max(0.1 * duration_s, 0.9 * duration_s - dur))), 3)
                values["gap"] = GapSpec(start_s=start, dur_s=dur)
            case "gain_db" if dist.gain_db:
                values["gain_db"] = draw(dist.gain_db)
    return CorruptionSpec(**values)


def apply_corruption(audio: AudioBuffer, spec: CorruptionSpec, cfg: Optional[StftConfig] = None) -> AudioBuffer:
    """Speed, offset, gap, gain, then additive white noise at the requested SNR"""
    sr = audio.sample_rate_hz
    if spec.speed_factor is not None:
        audio = speed_mod(audio, CoordParams(speed_factor=spec.speed_factor), cfg)
    samples = audio.samples.copy()
    n = samples.size
    if spec.offset_s is not None:
        shift = min(n, round(abs(spec.offset_s) * sr))
        if spec.offset_s > 0:
            samples = np.concatenate((np.zeros(shift), samples[: n - shift]))
        else:
            samples = np.concatenate((samples[shift:], np.zeros(shift)))
    if spec.gap is not None:
        start = min(n, round(spec.gap.start_s * sr))
        samples[start : min(n, start + round(spec.gap.dur_s * sr))] = 0.0
    if spec.gain_db is not None:
        samples = samples * 10 ** (spec.gain_db / 20)
    if spec.noise_snr_db is not None:
        rms = float(np.sqrt(np.mean(samples**2)))
        noise = np.random.default_rng(spec.seed).standard_normal(n)
        samples = samples + noise * rms / 10 ** (spec.noise_snr_db / 20)
    return AudioBuffer.from_unclipped(samples, sr)


def synth_corpus(
    n: int,
    out_dir: Path,
    dist: Optional[CorruptionDistribution] = None,
    seed: int = 0,
    profiles: Optional[ClassProfiles] = None,
) -> list[AVPairRecord]:
    """Write n pairs: clean twins under clean/ (original.jsonl), corrupted audio under audio/ (manifest.jsonl)"""
    if n < 1:
        raise InsufficientPairs(f"synth_corpus needs n >= 1, got {n}")
    dist = DEFAULT_DISTRIBUTION if dist is None else dist
    profiles = profiles or ClassProfiles.load()
    classes = list(profiles.profiles.values())
    out_dir = Path(out_dir)

    records, originals = [], []
    for index in range(n):
        pair_id = f"syn-{index:05d}"
        rng = np.random.default_rng([seed, index])
        profile = classes[index % len(classes)]
        clean, video = generate_pair(profile, rng)
        spec = sample_corruption(dist, rng, seed=int(rng.integers(2**31)))
        corrupted = apply_corruption(clean, spec) if spec is not None else clean

        write_wav(clean, out_dir / "clean" / f"{pair_id}.wav")
        write_wav(corrupted, out_dir / "audio" / f"{pair_id}.wav")
        originals.append(
            AVPairRecord(pair_id=pair_id, audio_path=f"clean/{pair_id}.wav", video_features=video)
        )
        records.append(
            AVPairRecord(
                pair_id=pair_id,
                audio_path=f"audio/{pair_id}.wav",
                video_features=video,
                ground_truth=spec,
                provenance=Provenance.SYNTHETIC,
            )
        )
    write_manifest(originals, out_dir / "original.jsonl")
    write_manifest(records, out_dir / "manifest.jsonl")
    logger.info(f"Synthesized {n} pairs (seed {seed}) into {out_dir}")
    return records


# Tables
def render_table(df: pl.DataFrame) -> str:
    """Aligned plain-text columns; floats at four decimals"""

    def cell(value: object) -> str:
        return f"{value:.4f}" if isinstance(value, float) else str(value)

    rows = [list(df.columns)] + [[cell(v) for v in row] for row in df.rows()]
    widths = [max(len(row[i]) for row in rows) for i in range(len(df.columns))]
    return "".join("  ".join(v.rjust(w) for v, w in zip(row, widths, strict=True)) + "\n" for row in rows)


def write_table(df: pl.DataFrame, stem: Path) -> tuple[Path, Path]:
    """Write <stem>.txt and <stem>.csv"""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    text_path, csv_path = stem.with_suffix(".txt"), stem.with_suffix(".csv")
    text_path.write_text(render_table(df), encoding="utf-8")
    df.write_csv(csv_path)
    return text_path, csv_path


# Mixture study
def _score_record(record: AVPairRecord, root: Path, scorer: ScorerKind) -> tuple[float, float]:
    scores = reflect(read_wav(root / record.audio_path), record.video_features, scorer)
    return scores.alignment, scores.temporal


def _score_all(
    records: list[AVPairRecord], root: Path, scorer: ScorerKind, parallelism: int
) -> dict[str, tuple[float, float]]:
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        scored = list(pool.map(partial(_score_record, root=Path(root), scorer=scorer), records))
    return {record.pair_id: score for record, score in zip(records, scored, strict=True)}


def mixture_study(
    aligned: list[AVPairRecord],
    original: list[AVPairRecord],
    cfg: MixtureStudyConfig,
    aligned_root: Path,
    original_root: Path,
    scorer: Optional[ScorerKind] = None,
    parallelism: int = 1,
) -> list[MixtureCell]:
    """Mean scores per (n_true, n_false) cell; cells draw nested prefixes of two seeded permutations"""
    scorer = scorer or ScorerKind(kind=cfg.scorer)
    shared = sorted({r.pair_id for r in aligned} & {r.pair_id for r in original})
    if len(shared) < max(len(aligned), len(original)):
        logger.warning(f"Mixture study: only {len(shared)} pair ids are present in both manifests")
    cells = cfg.cells()
    need_true = max(t for t, _ in cells)
    need_false = max(f for _, f in cells)
    if need_true > len(shared) or need_false > len(shared):
        raise InsufficientPairs(
            f"grid needs {need_true} true and {need_false} false pairs, manifests share {len(shared)}"
        )

    rng = np.random.default_rng(cfg.seed)
    true_ids = [shared[i] for i in rng.permutation(len(shared))[:need_true]]
    false_ids = [shared[i] for i in rng.permutation(len(shared))[:need_false]]
    by_id_true = {r.pair_id: r for r in aligned}
    by_id_false = {r.pair_id: r for r in original}
    true_scores = _score_all([by_id_true[i] for i in true_ids], aligned_root, scorer, parallelism)
    false_scores = _score_all([by_id_false[i] for i in false_ids], original_root, scorer, parallelism)

    out = []
    for n_true, n_false in cells:
        picked = [true_scores[i] for i in true_ids[:n_true]] + [false_scores[i] for i in false_ids[:n_false]]
        out.append(
            MixtureCell(
                n_true=n_true,
                n_false=n_false,
                mean_alignment=float(np.mean([a for a, _ in picked])),
                mean_temporal=float(np.mean([t for _, t in picked])),
            )
        )
        logger.info(f"Cell ({n_true} true, {n_false} false): alignment {out[-1].mean_alignment:.4f}")
    return out


def mixture_table(cells: list[MixtureCell]) -> pl.DataFrame:
    return pl.DataFrame([cell.model_dump() for cell in cells])


# Random-actions ablation
def _final_min(trace: WorkflowTrace) -> Optional[float]:
    if trace.terminal_reason == TerminalReason.ERROR or trace.final_scores is None:
        return None
    return trace.final_scores.min_score


def _arm_summary(name: str, planner: PlannerKind, traces: list[WorkflowTrace]) -> ArmSummary:
    done = [t for t in traces if _final_min(t) is not None and t.baseline_scores is not None]

    def mean(values: list[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    return ArmSummary(
        name=name,
        planner=planner,
        mean_baseline_min=mean([t.baseline_scores.min_score for t in done if t.baseline_scores]),
        mean_final_alignment=mean([t.final_scores.alignment for t in done if t.final_scores]),
        mean_final_temporal=mean([t.final_scores.temporal for t in done if t.final_scores]),
        mean_final_min=mean([t.final_scores.min_score for t in done if t.final_scores]),
        n_errored=len(traces) - len(done),
    )


def ablation_random_vs_agent(
    records: list[AVPairRecord],
    cfg: WorkflowConfig,
    seeds: list[int],
    root: Path,
    out_dir: Path,
    parallelism: int = 1,
    baseline: PlannerKind = PlannerKind.RANDOM,
    stft: Optional[StftConfig] = None,
    rules: Optional[RuleTable] = None,
    profiles: Optional[ClassProfiles] = None,
) -> AblationReport:
    """Run the rule-planner agent and a baseline planner over the same pairs for each seed"""
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    arms = [("agent", PlannerKind.RULE), (baseline.value, baseline)]
    traces: dict[str, list[WorkflowTrace]] = {name: [] for name, _ in arms}
    per_seed_win_rate = []
    wins, compared = 0, 0
    for seed in seeds:
        finals: dict[str, dict[str, Optional[float]]] = {}
        for name, planner in arms:
            arm_cfg = cfg.model_copy(update={"planner": planner, "seed": seed})
            runner = make_runner(arm_cfg, stft=stft, rules=rules, profiles=profiles)
            arm_dir = Path(out_dir) / f"seed-{seed}" / name
            run_batch(records, runner, arm_dir, root, parallelism)
            arm_traces = read_traces(arm_dir / "traces.jsonl")
            traces[name].extend(arm_traces)
            finals[name] = {t.pair_id: _final_min(t) for t in arm_traces}

        agent, other = finals["agent"], finals[baseline.value]
        pairs = [(agent[k], other[k]) for k in agent if agent[k] is not None and other.get(k) is not None]
        seed_wins = sum(1 for a, b in pairs if a is not None and b is not None and a >= b)
        per_seed_win_rate.append(seed_wins / len(pairs) if pairs else 0.0)
        wins += seed_wins
        compared += len(pairs)
        logger.info(f"Ablation seed {seed}: agent wins {seed_wins} of {len(pairs)} pairs")

    summaries = [_arm_summary(name, planner, traces[name]) for name, planner in arms]
    return AblationReport(
        n_pairs=len(records),
        seeds=list(seeds),
        arms=summaries,
        mean_delta=summaries[0].mean_final_min - summaries[1].mean_final_min,
        win_rate=wins / compared if compared else 0.0,
        per_seed_win_rate=per_seed_win_rate,
    )


def ablation_table(report: AblationReport) -> pl.DataFrame:
    return pl.DataFrame([arm.model_dump(mode="json") for arm in report.arms])


# Recovery study
def oracle_actions(spec: Optional[CorruptionSpec]) -> list[EditAction]:
    """Every action at default parameters, plus speed and pitch grids and the exact inverse speed"""
    actions = [
        EditAction.build(kind)
        for kind in (
            ActionKind.SPECTRAL_SUBTRACTION,
            ActionKind.WIENER_FILTER,
            ActionKind.WAVELET_DENOISE,
            ActionKind.SPECTRAL_GATE,
            ActionKind.FILL_BLANKS,
        )
    ]
    actions.append(EditAction.build(ActionKind.VOLUME_ADJUST, target_rms=SYNTH_RMS))
    factors = {round(float(f), 3) for f in np.geomspace(0.5, 2.0, 13)} - {1.0}
    if spec is not None and spec.speed_factor is not None:
        factors.add(round(min(2.0, max(0.5, 1.0 / spec.speed_factor)), 3))
    actions += [EditAction.build(ActionKind.SPEED_MOD, speed_factor=f) for f in sorted(factors)]
    actions += [EditAction.build(ActionKind.PITCH_MOD, pitch_semitones=s) for s in (-2.0, -1.0, 1.0, 2.0)]
    return actions


def oracle_score(
    audio: AudioBuffer, video: VideoFeatureSeries, spec: Optional[CorruptionSpec], scorer: ScorerKind
) -> float:
    """Best min-score over single actions, never below the unedited audio's"""
    best = reflect(audio, video, scorer).min_score
    for action in oracle_actions(spec):
        candidate = apply_action(audio, action, cfg=scorer.stft)
        best = max(best, reflect(candidate, video, scorer).min_score)
    return best


def _recovery(clean: float, corrupted: float, value: float) -> float:
    gap = clean - corrupted
    return 1.0 if gap <= GAP_EPS else (value - corrupted) / gap


def recovery_study(
    records: list[AVPairRecord],
    clean: list[AVPairRecord],
    cfg: WorkflowConfig,
    root: Path,
    stft: Optional[StftConfig] = None,
    rules: Optional[RuleTable] = None,
    profiles: Optional[ClassProfiles] = None,
) -> list[RecoveryRow]:
    """Per corruption class: clean, corrupted, agent and oracle mean min-scores and the recovered share"""
    runner = make_runner(cfg, stft=stft, rules=rules, profiles=profiles)
    clean_twins = {r.pair_id: r for r in clean}
    per_class: dict[str, list[tuple[float, float, float, float]]] = {}
    for record in sorted(records, key=lambda r: r.pair_id):
        twin = clean_twins.get(record.pair_id)
        if record.ground_truth is None or twin is None:
            logger.debug(f"Pair {record.pair_id}: no ground truth or clean twin, skipped")
            continue
        video = record.video_features
        corrupted_audio = read_wav(Path(root) / record.audio_path)
        clean_score = reflect(read_wav(Path(root) / twin.audio_path), video, runner.scorer).min_score
        _, trace = runner.run(record.pair_id, corrupted_audio, video)
        corrupted_score = trace.baseline_scores.min_score if trace.baseline_scores else 0.0
        agent_score = trace.final_scores.min_score if trace.final_scores else corrupted_score
        oracle = oracle_score(corrupted_audio, video, record.ground_truth, runner.scorer)
        per_class.setdefault(record.ground_truth.corruption_class, []).append(
            (clean_score, corrupted_score, agent_score, oracle)
        )

    rows = []
    for name, values in sorted(per_class.items()):
        mean_clean, mean_corrupted, mean_agent, mean_oracle = (float(v) for v in np.mean(values, axis=0))
        agent_recovery = _recovery(mean_clean, mean_corrupted, mean_agent)
        oracle_recovery = _recovery(mean_clean, mean_corrupted, mean_oracle)
        threshold = RECOVERY_TARGET if oracle_recovery >= RECOVERY_TARGET else ORACLE_SHARE * oracle_recovery
        rows.append(
            RecoveryRow(
                corruption_class=name,
                n_pairs=len(values),
                mean_clean=mean_clean,
                mean_corrupted=mean_corrupted,
                mean_agent=mean_agent,
                mean_oracle=mean_oracle,
                agent_recovery=agent_recovery,
                oracle_recovery=oracle_recovery,
                threshold=threshold,
                passed=agent_recovery >= threshold,
            )
        )
        logger.info(f"Recovery {name}: agent {agent_recovery:.2f}, oracle {oracle_recovery:.2f}, need {threshold:.2f}")
    return rows


def recovery_table(rows: list[RecoveryRow]) -> pl.DataFrame:
    return pl.DataFrame([row.model_dump() for row in rows])
