"""Phase timing and counters for observability."""

import logging
import time
from collections import defaultdict
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any

logger = logging.getLogger(__name__)

OURNET_INFER = "ournet_infer"
PPGM_MATCH = "ppgm_match"
PPGM_REGISTER = "ppgm_register"
TRAIN_STEP = "train_step"

PRIOR_CACHE_HIT = "prior_cache_hit"
PRIOR_CACHE_MISS = "prior_cache_miss"


@dataclass
class PhaseTimer:
    """In-memory collector of wall-clock durations per named phase."""

    durations: dict[str, list[float]] = field(default_factory=lambda: defaultdict(list))
    counters: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    max_samples: int = 10000  # Keep the most recent samples per phase

    def record(self, phase: str, duration_seconds: float) -> None:
        samples = self.durations[phase]
        samples.append(duration_seconds)
        if len(samples) > self.max_samples:
            samples.pop(0)

    def increment(self, counter: str, amount: int = 1) -> None:
        self.counters[counter] += amount

    @contextmanager
    def time(self, phase: str) -> Iterator[None]:
        """Time the enclosed block, recording it even when it raises."""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.record(phase, time.perf_counter() - start)

    def get_percentile(self, phase: str, percentile: float) -> float:
        """Get percentile duration (e.g., 0.95 for p95)."""
        samples = self.durations.get(phase)
        if not samples:
            return 0.0
        ordered = sorted(samples)
        index = int(len(ordered) * percentile)
        return ordered[min(index, len(ordered) - 1)]

    def get_stats(self) -> dict[str, Any]:
        """Per-phase count/total/p50/p95 plus counters."""
        phases = {
            phase: {
                "count": len(samples),
                "total": sum(samples),
                "p50": self.get_percentile(phase, 0.50),
                "p95": self.get_percentile(phase, 0.95),
            }
            for phase, samples in self.durations.items()
            if samples
        }
        return {"phases": phases, "counters": dict(self.counters)}

    def log_summary(self) -> None:
        stats = self.get_stats()
        if not stats["phases"] and not stats["counters"]:
            return
        logger.info("Timing Summary:")
        for phase, s in stats["phases"].items():
            logger.info(
                f"  {phase}: n={s['count']} total={s['total']:.3f}s "
                f"p50={s['p50']:.4f}s p95={s['p95']:.4f}s"
            )
        for name, value in stats["counters"].items():
            logger.info(f"  {name}: {value}")

    def reset(self) -> None:
        self.durations.clear()
        self.counters.clear()


# Global timer instance
phase_timer = PhaseTimer()


def get_phase_timer() -> PhaseTimer:
    """Get the global phase timer."""
    return phase_timer
