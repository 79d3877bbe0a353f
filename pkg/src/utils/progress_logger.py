"""Progress logger for staged training runs"""
import time
from typing import Any, Dict, Optional

import structlog

logger = structlog.get_logger(__name__)


class ProgressLogger:
    """Emits structured events as a run moves through its stages"""

    def __init__(self, log_every: int = 10):
        self.log_every = max(1, log_every)
        self.run_start: Optional[float] = None
        self.current_stage: Optional[str] = None
        self.stage_start: Optional[float] = None

    def start_run(self, command: str, **context: Any):
        """Start a run and bind its context to subsequent events"""
        self.run_start = time.perf_counter()
        structlog.contextvars.bind_contextvars(command=command)
        logger.info("run_started", **context)

    def start_stage(self, stage_name: str, steps: int, description: str = ""):
        """Start a new training stage"""
        self.current_stage = stage_name
        self.stage_start = time.perf_counter()
        logger.info("stage_started", stage=stage_name, steps=steps, description=description)

    def log_step(self, step: int, values: Dict[str, float]):
        """Log a step, throttled to every log_every steps"""
        if step % self.log_every != 0:
            return
        logger.info("step", stage=self.current_stage, step=step,
                    **{k: round(float(v), 6) for k, v in values.items()})

    def log_error(self, error: str, recovery_action: Optional[str] = None):
        """Log errors with optional recovery actions"""
        logger.error("run_error", stage=self.current_stage, error=error,
                     recovery=recovery_action)

    def complete_stage(self, **summary: Any) -> float:
        """Complete the current stage with timing"""
        duration = 0.0
        if self.stage_start is not None:
            duration = time.perf_counter() - self.stage_start
        logger.info("stage_completed", stage=self.current_stage,
                    duration_s=round(duration, 3), **summary)
        self.current_stage = None
        self.stage_start = None
        return duration

    def complete_run(self, stats: Dict[str, Any]):
        """Complete the run with summary statistics"""
        total = time.perf_counter() - self.run_start if self.run_start is not None else 0.0
        logger.info("run_completed", duration_s=round(total, 3), **stats)
        structlog.contextvars.unbind_contextvars("command")

