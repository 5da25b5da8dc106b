"""avalign command line.

Exit codes: 0 success, 2 the aligned pair ended in a workflow error, 64 usage or configuration
error, 66 missing or unreadable input, 70 internal error.
"""

import argparse
import json
import logging
import sys
from collections.abc import Callable, Mapping
from pathlib import Path
from typing import Any, NoReturn, Optional

from pydantic import ValidationError

from avalign.audio import write_wav
from avalign.backend import BackendClient
from avalign.config import PipelineConfig, load_config
from avalign.corpus import (
    DEFAULT_DISTRIBUTION,
    ablation_random_vs_agent,
    ablation_table,
    mixture_study,
    mixture_table,
    read_manifest,
    recovery_study,
    recovery_table,
    render_table,
    synth_corpus,
    write_table,
)
from avalign.database import create_tables
from avalign.errors import AvalignError, ConfigError, CorpusError, MissingAudioFile, SignalError
from avalign.models import (
    AcceptanceRule,
    AVPairRecord,
    BackendChoice,
    CorruptionDistribution,
    MixtureStudyConfig,
    PlannerKind,
    RevertPolicy,
    ScorerChoice,
    TerminalReason,
    VideoFeatureSeries,
    canonical_json,
)
from avalign.reflection import ScorerKind
from avalign.services import RunRegistryService
from avalign.workflow import read_traces, render_report, run_batch, run_pair_safe

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PAIR_ERROR = 2
EXIT_USAGE = 64
EXIT_NO_INPUT = 66
EXIT_INTERNAL = 70

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

Handler = Callable[[argparse.Namespace, PipelineConfig], int]


class AvalignArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside (0, 1]")
    return value


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return value


def non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return value


def non_negative_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return value


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=LOG_LEVELS[level], format="%(asctime)s - %(name)s - %(levelname)s - %(message)s", force=True
    )
    # suppress sqlalchemy engine logs below warning level
    logging.getLogger("sqlalchemy.engine.Engine").setLevel(logging.WARNING)


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file layered over the defaults (default: none)")
    common.add_argument(
        "--log", choices=sorted(LOG_LEVELS), default="info", help="log level (default: %(default)s)"
    )
    common.add_argument(
        "--effective-config",
        action="store_true",
        help="print the resolved configuration as YAML and exit (default: off)",
    )
    common.add_argument("--seed", type=int, help="base random seed (default: 0)")
    common.add_argument("--profiles", type=Path, help="class profiles JSON (default: bundled profiles)")
    return common


def _workflow_options() -> argparse.ArgumentParser:
    flow = argparse.ArgumentParser(add_help=False)
    flow.add_argument("--planner", choices=[k.value for k in PlannerKind], help="planner (default: rule)")
    flow.add_argument("--captioner", choices=[k.value for k in BackendChoice], help="captioner (default: builtin)")
    flow.add_argument("--scorer", choices=[k.value for k in ScorerChoice], help="scorer (default: proxy)")
    flow.add_argument("--max-cycles", type=positive_int, help="edit cycles per pair (default: 5)")
    flow.add_argument("--threshold", type=unit_interval, help="stop once both scores reach this (default: 0.85)")
    flow.add_argument(
        "--epsilon", type=non_negative_float, help="minimum min-score gain to accept a cycle (default: 0.01)"
    )
    flow.add_argument(
        "--revert-policy",
        choices=[k.value for k in RevertPolicy],
        help="build candidates from the original or chain accepted edits (default: original_on_no_improve)",
    )
    flow.add_argument(
        "--acceptance",
        choices=[k.value for k in AcceptanceRule],
        help="acceptance rule for a candidate (default: min_score)",
    )
    return flow


def _range(name: str) -> dict[str, Any]:
    return {"nargs": 2, "type": float, "metavar": ("LOW", "HIGH"), "help": f"{name} range (default: built-in range)"}


def build_parser() -> AvalignArgumentParser:
    parser = AvalignArgumentParser(prog="avalign", description="Align audio tracks with their paired video")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=AvalignArgumentParser)
    common, flow = _common_options(), _workflow_options()

    align = sub.add_parser("align", parents=[common, flow], help="align one pair")
    align.add_argument("--audio", type=Path, required=True, help="input WAV (required)")
    align.add_argument("--features", type=Path, required=True, help="video feature series JSON (required)")
    align.add_argument("--out", type=Path, help="aligned WAV path (default: <audio>.aligned.wav)")
    align.add_argument("--trace", type=Path, help="trace JSON path (default: <out>.trace.json)")
    align.set_defaults(handler=cmd_align)

    batch = sub.add_parser("batch", parents=[common, flow], help="align every pair of a manifest")
    batch.add_argument("--manifest", type=Path, required=True, help="input manifest (required)")
    batch.add_argument("--out", type=Path, required=True, help="output directory (required)")
    batch.add_argument("--root", type=Path, help="audio path root (default: the manifest's directory)")
    batch.add_argument("--parallelism", type=positive_int, help="pairs aligned concurrently (default: 1)")
    batch.add_argument("--record", action="store_true", help="store the run in the run registry (default: off)")
    batch.set_defaults(handler=cmd_batch)

    synth = sub.add_parser("synth", parents=[common], help="generate a synthetic corrupted corpus")
    synth.add_argument("--n", type=positive_int, required=True, help="number of pairs (required)")
    synth.add_argument("--out", type=Path, required=True, help="output directory (required)")
    synth.add_argument("--noise-snr", **_range("noise SNR dB"))
    synth.add_argument("--offset", **_range("offset magnitude s"))
    synth.add_argument("--speed", **_range("speed factor"))
    synth.add_argument("--gap", **_range("gap duration s"))
    synth.add_argument("--gain", **_range("gain dB"))
    synth.add_argument(
        "--all-fields", action="store_true", help="apply every configured corruption to each pair (default: one)"
    )
    synth.add_argument("--clean", action="store_true", help="generate uncorrupted pairs only (default: off)")
    synth.set_defaults(handler=cmd_synth)

    analyze = sub.add_parser("analyze", parents=[common, flow], help="mixture or recovery study")
    analyze.add_argument(
        "--study", choices=["mixture", "recovery"], default="mixture", help="study to run (default: %(default)s)"
    )
    analyze.add_argument(
        "--aligned", type=Path, help="aligned (true) manifest for the mixture study (default: none)"
    )
    analyze.add_argument(
        "--original", type=Path, required=True, help="original (false / corrupted) manifest (required)"
    )
    analyze.add_argument("--clean", type=Path, help="clean-twin manifest for the recovery study (default: none)")
    analyze.add_argument(
        "--n-true", type=non_negative_int, default=50, help="true pairs per unit cell (default: %(default)s)"
    )
    analyze.add_argument(
        "--n-false", type=non_negative_int, default=50, help="false pairs per unit cell (default: %(default)s)"
    )
    analyze.add_argument("--parallelism", type=positive_int, help="pairs scored concurrently (default: 1)")
    analyze.add_argument("--out", type=Path, required=True, help="report path stem, .txt and .csv added (required)")
    analyze.set_defaults(handler=cmd_analyze)

    ablate = sub.add_parser("ablate", parents=[common, flow], help="rule planner against random actions")
    ablate.add_argument("--manifest", type=Path, required=True, help="corrupted manifest (required)")
    ablate.add_argument("--out", type=Path, required=True, help="output directory (required)")
    ablate.add_argument("--pairs", type=positive_int, help="use the first N pairs by id (default: all)")
    ablate.add_argument("--seeds", type=positive_int, default=3, help="number of seeds (default: %(default)s)")
    ablate.add_argument("--parallelism", type=positive_int, help="pairs aligned concurrently (default: 1)")
    ablate.set_defaults(handler=cmd_ablate)

    inspect = sub.add_parser("inspect", parents=[common], help="list recorded batch runs")
    inspect.add_argument("--run", type=int, help="show the outcomes of one run (default: list runs)")
    inspect.add_argument("--limit", type=positive_int, default=20, help="runs listed (default: %(default)s)")
    inspect.set_defaults(handler=cmd_inspect)
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    """Flags that were given, as a config layer"""
    flags = {
        "threshold": "threshold",
        "max_cycles": "max_cycles",
        "epsilon": "improvement_epsilon",
        "revert_policy": "revert_policy",
        "acceptance": "acceptance_rule",
        "planner": "planner",
        "captioner": "captioner",
        "scorer": "scorer",
        "seed": "seed",
    }
    workflow = {key: getattr(args, flag) for flag, key in flags.items() if getattr(args, flag, None) is not None}
    out: dict[str, Any] = {"workflow": workflow} if workflow else {}
    if getattr(args, "parallelism", None) is not None:
        out["parallelism"] = args.parallelism
    if args.profiles is not None:
        out["profiles_path"] = str(args.profiles)
    return out


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"input not found: {path}")
    return path


def cmd_align(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    audio_path = _require_file(args.audio)
    features_path = _require_file(args.features)
    try:
        video = VideoFeatureSeries.model_validate(json.loads(features_path.read_text(encoding="utf-8")))
    except (ValueError, ValidationError) as e:
        logger.error(f"Unreadable features file {features_path}: {e}")
        raise FileNotFoundError(f"unreadable features file {features_path}") from e

    out = args.out or audio_path.with_suffix(".aligned.wav")
    trace_path = args.trace or out.with_suffix(".trace.json")
    pair = AVPairRecord(pair_id=audio_path.stem, audio_path=str(audio_path), video_features=video)
    audio, trace = run_pair_safe(pair, cfg.runner(), Path("."))
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    trace_path.write_text(canonical_json(trace.to_canonical()) + "\n", encoding="utf-8")
    if audio is None or trace.final_scores is None:
        sys.stderr.write(f"{pair.pair_id}: {trace.error}\n")
        return EXIT_PAIR_ERROR

    write_wav(audio, out)
    sys.stdout.write(
        f"{pair.pair_id}: alignment {trace.final_scores.alignment:.4f} temporal {trace.final_scores.temporal:.4f} "
        f"({trace.terminal_reason.value}, {len(trace.cycles)} cycles) -> {out}\n"
    )
    return EXIT_PAIR_ERROR if trace.terminal_reason == TerminalReason.ERROR else EXIT_OK


def cmd_batch(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    manifest = _require_file(args.manifest)
    records = read_manifest(manifest)
    root = args.root or manifest.parent
    report = run_batch(records, cfg.runner(), args.out, root, cfg.parallelism)
    if args.record:
        create_tables()
        run_id = RunRegistryService.record_batch(
            out_dir=str(args.out),
            manifest_path=str(manifest),
            planner=cfg.workflow.planner.value,
            report=report,
            traces=read_traces(args.out / "traces.jsonl"),
            config=cfg.redacted(),
        )
        sys.stdout.write(f"recorded as run {run_id}\n")
    sys.stdout.write(render_report(report))
    return EXIT_OK


def distribution_from_args(args: argparse.Namespace) -> CorruptionDistribution:
    if args.clean:
        return CorruptionDistribution()
    given = {
        name: tuple(value)
        for name, value in (
            ("noise_snr_db", args.noise_snr),
            ("offset_s", args.offset),
            ("speed_factor", args.speed),
            ("gap_dur_s", args.gap),
            ("gain_db", args.gain),
        )
        if value is not None
    }
    base = CorruptionDistribution(**given) if given else DEFAULT_DISTRIBUTION
    return base.model_copy(update={"single_field": not args.all_fields})


def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    records = synth_corpus(
        args.n, args.out, distribution_from_args(args), seed=cfg.workflow.seed, profiles=cfg.profiles()
    )
    sys.stdout.write(f"synthesized {len(records)} pairs into {args.out}\n")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    original_path = _require_file(args.original)
    original = read_manifest(original_path)
    match args.study:
        case "recovery":
            if args.clean is None:
                raise ConfigError("the recovery study needs --clean")
            clean_path = _require_file(args.clean)
            rows = recovery_study(
                original,
                read_manifest(clean_path),
                cfg.workflow,
                original_path.parent,
                stft=cfg.stft,
                rules=cfg.rules,
                profiles=cfg.profiles(),
            )
            table = recovery_table(rows)
        case _:
            if args.aligned is None:
                raise ConfigError("the mixture study needs --aligned")
            aligned_path = _require_file(args.aligned)
            study = MixtureStudyConfig(
                n_true=args.n_true, n_false=args.n_false, scorer=cfg.workflow.scorer, seed=cfg.workflow.seed
            )
            client = BackendClient(cfg.backend) if cfg.backend is not None else None
            scorer = ScorerKind(
                kind=cfg.workflow.scorer,
                class_profiles=cfg.profiles(),
                stft=cfg.stft,
                endpoint=cfg.backend,
                client=client,
            )
            cells = mixture_study(
                read_manifest(aligned_path),
                original,
                study,
                aligned_path.parent,
                original_path.parent,
                scorer=scorer,
                parallelism=cfg.parallelism,
            )
            table = mixture_table(cells)
    write_table(table, args.out)
    sys.stdout.write(render_table(table))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    manifest = _require_file(args.manifest)
    records = sorted(read_manifest(manifest), key=lambda r: r.pair_id)
    if args.pairs is not None:
        records = records[: args.pairs]
    seeds = [cfg.workflow.seed + i for i in range(args.seeds)]
    report = ablation_random_vs_agent(
        records,
        cfg.workflow,
        seeds,
        manifest.parent,
        args.out,
        parallelism=cfg.parallelism,
        stft=cfg.stft,
        rules=cfg.rules,
        profiles=cfg.profiles(),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.json").write_text(canonical_json(report.model_dump(mode="json")) + "\n", encoding="utf-8")
    table = ablation_table(report)
    write_table(table, args.out / "ablation")
    sys.stdout.write(render_table(table))
    sys.stdout.write(f"mean delta {report.mean_delta:+.4f}, win rate {report.win_rate:.3f}\n")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    create_tables()
    if args.run is None:
        for run in RunRegistryService.list_runs(args.limit):
            sys.stdout.write(
                f"{run.id:>5}  {run.created_at:%Y-%m-%d %H:%M}  {run.planner:<7}{run.n_completed:>5}/{run.n_pairs:<5}"
                f"{run.mean_baseline_min:.4f} -> {run.mean_final_min:.4f}  {run.out_dir}\n"
            )
        return EXIT_OK
    if RunRegistryService.get_run(args.run) is None:
        sys.stderr.write(f"no recorded run {args.run}\n")
        return EXIT_NO_INPUT
    for outcome in RunRegistryService.get_outcomes(args.run):
        final = "-"
        if outcome.final_alignment is not None and outcome.final_temporal is not None:
            final = f"{outcome.final_alignment:.4f}/{outcome.final_temporal:.4f}"
        sys.stdout.write(f"{outcome.pair_id:<24}{outcome.terminal_reason:<20}{outcome.cycles:>3}  {final}\n")
    return EXIT_OK


def main(argv: Optional[list[str]] = None, environ: Optional[Mapping[str, str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log)

    if args.config is not None and not args.config.is_file():
        sys.stderr.write(f"config file not found: {args.config}\n")
        return EXIT_NO_INPUT
    try:
        cfg = load_config(args.config, environ=environ, overrides=overrides_from_args(args))
    except ConfigError as e:
        logger.error(f"Configuration rejected: {e}")
        sys.stderr.write(f"configuration error: {e}\n")
        return EXIT_USAGE
    if args.effective_config:
        sys.stdout.write(cfg.to_yaml())
        return EXIT_OK
    logger.info(f"Effective config for {args.command}: {canonical_json(cfg.redacted())}")

    handler: Handler = args.handler
    try:
        return handler(args, cfg)
    except ConfigError as e:
        logger.error(f"Configuration rejected: {e}")
        sys.stderr.write(f"configuration error: {e}\n")
        return EXIT_USAGE
    except (FileNotFoundError, MissingAudioFile, CorpusError, SignalError) as e:
        logger.error(f"Input error: {e}")
        sys.stderr.write(f"{e}\n")
        return EXIT_NO_INPUT
    except (AvalignError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        sys.stderr.write(f"{args.command} failed: {e}\n")
        return EXIT_INTERNAL
