import pytest
from pydantic import ValidationError
from sqlalchemy import inspect
from sqlmodel import SQLModel

from avalign.database import ENGINE, create_tables
from avalign.models import (
    ActionKind,
    ActionPlan,
    BatchRun,
    Caption,
    CoordParams,
    CorruptionSpec,
    EditAction,
    GapSpec,
    MixtureStudyConfig,
    NoiseParams,
    PlanContext,
    PlannerKind,
    ReflectionScores,
    StftConfig,
    VideoFeatureSeries,
    WaveletParams,
)


def plan(*actions: EditAction) -> ActionPlan:
    return ActionPlan(actions=list(actions), planner_kind=PlannerKind.RULE)


def test_params_follow_kind():
    assert isinstance(EditAction.build("wiener_filter").params, NoiseParams)
    assert isinstance(EditAction.build("wavelet_denoise", levels=3).params, WaveletParams)
    speed = EditAction.build(ActionKind.SPEED_MOD)
    assert isinstance(speed.params, CoordParams)
    assert speed.params.speed_factor == 1.0
    assert EditAction.build("pitch_mod").params.pitch_semitones == 0.0


def test_unknown_or_out_of_range_params_rejected():
    with pytest.raises(ValidationError):
        EditAction.build("wiener_filter", levels=3)
    with pytest.raises(ValidationError):
        EditAction.build("speed_mod", speed_factor=2.5)
    with pytest.raises(ValueError):
        EditAction.build("reverse_audio")


def test_volume_takes_exactly_one_target():
    with pytest.raises(ValidationError):
        EditAction.build("volume_adjust", gain_db=3.0, target_rms=0.1)
    assert EditAction.build("volume_adjust").params.gain_db == 0.0
    by_target = EditAction.build("volume_adjust", target_rms=0.1)
    assert by_target.params.gain_db is None


def test_action_mapping_round_trip():
    action = EditAction.build("spectral_gate", rationale="hiss", gate_threshold_db=-30.0)
    again = EditAction.from_mapping(action.to_canonical())
    assert again == action
    assert "rationale" not in action.to_canonical(with_rationale=False)
    assert action.signature() == EditAction.build("spectral_gate", gate_threshold_db=-30.0).signature()


def test_plan_ordering_and_size():
    noise, coord = EditAction.build("wiener_filter"), EditAction.build("speed_mod", speed_factor=1.1)
    assert plan(noise, coord).kinds() == ["wiener_filter", "speed_mod"]
    with pytest.raises(ValidationError):
        plan(coord, noise)
    with pytest.raises(ValidationError):
        plan(noise, EditAction.build("spectral_gate"))
    with pytest.raises(ValidationError):
        plan(coord, EditAction.build("pitch_mod"))
    with pytest.raises(ValidationError):
        plan()


def test_noop_plan_is_unity_gain_only():
    assert plan(EditAction.build("volume_adjust")).is_noop
    assert not plan(EditAction.build("volume_adjust", gain_db=1.0)).is_noop
    assert not plan(EditAction.build("volume_adjust", target_rms=0.1)).is_noop
    assert not plan(EditAction.build("wiener_filter"), EditAction.build("volume_adjust")).is_noop


def test_plan_context_feedback_only_after_first_cycle():
    caption = Caption(text="x", features={"rms": 0.1})
    scores = ReflectionScores(alignment=0.5, temporal=0.5)
    PlanContext(audio_caption=caption, video_caption=caption)
    PlanContext(audio_caption=caption, video_caption=caption, cycle_index=2, feedback=scores)
    with pytest.raises(ValidationError):
        PlanContext(audio_caption=caption, video_caption=caption, feedback=scores)
    with pytest.raises(ValidationError):
        PlanContext(audio_caption=caption, video_caption=caption, cycle_index=1)


def test_builtin_captions_need_finite_features():
    with pytest.raises(ValidationError):
        Caption(text="x")
    with pytest.raises(ValidationError):
        Caption(text="x", features={"rms": float("nan")})


def test_corruption_spec_classes():
    with pytest.raises(ValidationError):
        CorruptionSpec(seed=3)
    assert CorruptionSpec(noise_snr_db=5.0).corruption_class == "noise_snr_db"
    both = CorruptionSpec(offset_s=0.2, gap=GapSpec(start_s=1.0, dur_s=0.5))
    assert both.corruption_class == "offset_s+gap"


def test_video_activity_must_be_non_negative():
    with pytest.raises(ValidationError):
        VideoFeatureSeries(frame_rate_hz=24.0, activity=[0.1, -0.2])
    with pytest.raises(ValidationError):
        VideoFeatureSeries(frame_rate_hz=24.0, activity=[])
    assert VideoFeatureSeries(frame_rate_hz=24.0, activity=[0.0] * 48).duration_s == 2.0


def test_stft_grid():
    cfg = StftConfig()
    assert (cfg.win_length(8000), cfg.hop_length(8000), cfg.n_fft(8000)) == (400, 200, 512)
    with pytest.raises(ValidationError):
        StftConfig(window_ms=20.0, hop_ms=30.0)


def test_mixture_config_needs_some_pairs():
    with pytest.raises(ValidationError):
        MixtureStudyConfig(n_true=0, n_false=0)
    assert MixtureStudyConfig(n_true=2, n_false=3).cells() == [(2, 0), (0, 3), (2, 3), (2, 6), (4, 3)]
    assert MixtureStudyConfig(grid=[(1, 1)]).cells() == [(1, 1)]


def test_batch_run_timestamps_carry_a_timezone():
    assert BatchRun(out_dir="out", manifest_path="m.jsonl", planner="rule").created_at.tzinfo is not None


@pytest.mark.sqlmodel
def test_registry_tables_exist():
    """Registry tables are created on the configured database"""
    create_tables()
    db_tables = set(inspect(ENGINE).get_table_names())
    for table_name in SQLModel.metadata.tables:
        assert table_name in db_tables, f"Table '{table_name}' not found in database"
