from avalign.models import BatchReport, ReflectionScores, TerminalReason, WorkflowTrace
from avalign.services import RunRegistryService


def make_trace(pair_id: str, error: str | None = None) -> WorkflowTrace:
    if error is not None:
        return WorkflowTrace(pair_id=pair_id, terminal_reason=TerminalReason.ERROR, error=error)
    scores = ReflectionScores(alignment=0.6, temporal=0.7)
    return WorkflowTrace(
        pair_id=pair_id,
        baseline_scores=scores,
        final_scores=scores,
        terminal_reason=TerminalReason.BUDGET_EXHAUSTED,
    )


def record(out_dir: str, traces: list[WorkflowTrace]) -> int:
    report = BatchReport(n_pairs=len(traces), n_completed=sum(t.error is None for t in traces))
    return RunRegistryService.record_batch(
        out_dir=out_dir,
        manifest_path="corpus/manifest.jsonl",
        planner="rule",
        report=report,
        traces=traces,
        config={"workflow": {"threshold": 0.85}},
    )


def test_record_batch_stores_run_and_outcomes(clean_db):
    """Recording a batch stores the run and one outcome row per trace"""
    run_id = record("out/a", [make_trace("b"), make_trace("a"), make_trace("c", error="boom")])

    run = RunRegistryService.get_run(run_id)
    assert run is not None
    assert run.out_dir == "out/a"
    assert run.n_pairs == 3
    assert run.n_completed == 2
    assert run.config == {"workflow": {"threshold": 0.85}}

    outcomes = RunRegistryService.get_outcomes(run_id)
    assert [o.pair_id for o in outcomes] == ["a", "b", "c"]
    assert outcomes[0].final_alignment == 0.6
    assert outcomes[2].terminal_reason == "error"
    assert outcomes[2].final_alignment is None
    assert outcomes[2].error == "boom"


def test_list_runs_newest_first(clean_db):
    first = record("out/1", [make_trace("a")])
    second = record("out/2", [make_trace("a")])
    third = record("out/3", [make_trace("a")])

    assert [run.id for run in RunRegistryService.list_runs()] == [third, second, first]
    assert [run.id for run in RunRegistryService.list_runs(limit=2)] == [third, second]


def test_unknown_run(clean_db):
    assert RunRegistryService.get_run(42) is None
    assert RunRegistryService.get_outcomes(42) == []


def test_long_errors_are_truncated(clean_db):
    run_id = record("out/x", [make_trace("a", error="x" * 5000)])
    outcome = RunRegistryService.get_outcomes(run_id)[0]
    assert outcome.error is not None
    assert len(outcome.error) == 2000


def test_empty_registry(clean_db):
    assert RunRegistryService.list_runs() == []
