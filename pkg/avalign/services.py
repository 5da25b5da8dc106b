import logging
from typing import Any, List, Optional

from sqlalchemy import desc
from sqlmodel import select

from avalign.database import get_session
from avalign.models import BatchReport, BatchRun, PairOutcome, WorkflowTrace

logger = logging.getLogger(__name__)


class RunRegistryService:
    """Service for recording batch runs and querying their outcomes"""

    @staticmethod
    def record_batch(
        out_dir: str,
        manifest_path: str,
        planner: str,
        report: BatchReport,
        traces: List[WorkflowTrace],
        config: Optional[dict[str, Any]] = None,
    ) -> int:
        """Store a finished batch and one outcome row per pair; returns the run id"""
        with get_session() as session:
            run = BatchRun(
                out_dir=out_dir,
                manifest_path=manifest_path,
                planner=planner,
                n_pairs=report.n_pairs,
                n_completed=report.n_completed,
                n_errored=report.n_errored,
                mean_baseline_min=report.mean_baseline_min,
                mean_final_min=report.mean_final_min,
                config=config or {},
            )
            session.add(run)
            session.commit()
            session.refresh(run)
            if run.id is None:
                raise ValueError("Run id is None after commit")
            run_id = run.id

            for trace in traces:
                session.add(
                    PairOutcome(
                        run_id=run_id,
                        pair_id=trace.pair_id,
                        terminal_reason=trace.terminal_reason.value,
                        cycles=len(trace.cycles),
                        baseline_alignment=trace.baseline_scores.alignment if trace.baseline_scores else None,
                        baseline_temporal=trace.baseline_scores.temporal if trace.baseline_scores else None,
                        final_alignment=trace.final_scores.alignment if trace.final_scores else None,
                        final_temporal=trace.final_scores.temporal if trace.final_scores else None,
                        error=trace.error[:2000] if trace.error else None,
                    )
                )
            session.commit()
            logger.info(f"Recorded batch run {run_id} with {len(traces)} pair outcomes")
            return run_id

    @staticmethod
    def list_runs(limit: int = 20) -> List[BatchRun]:
        """Most recent runs first"""
        with get_session() as session:
            return list(session.exec(select(BatchRun).order_by(desc(BatchRun.id)).limit(limit)).all())

    @staticmethod
    def get_run(run_id: int) -> Optional[BatchRun]:
        with get_session() as session:
            return session.get(BatchRun, run_id)

    @staticmethod
    def get_outcomes(run_id: int) -> List[PairOutcome]:
        """Outcomes of one run ordered by pair id"""
        with get_session() as session:
            return list(
                session.exec(
                    select(PairOutcome).where(PairOutcome.run_id == run_id).order_by(PairOutcome.pair_id)
                ).all()
            )
