"""
Stage Timing Decorator
Collects wall-clock statistics for pipeline stages (NeRF training, extraction,
registration steps) so the CLI can report them at exit.
"""

import functools
import logging
import statistics
import time
from typing import Callable, Dict, List, Optional

logger = logging.getLogger(__name__)


class PerformanceTimer:
    """Collects per-stage execution times in milliseconds."""

    def __init__(self):
        self.timings: Dict[str, List[float]] = {}

    def record(self, stage: str, seconds: float):
        """Record one execution of a stage."""
        self.timings.setdefault(stage, []).append(seconds * 1000.0)

    def get_statistics(self, stage: str) -> Dict[str, float]:
        """Count, mean, min, max and standard deviation (ms) for one stage."""
        times = self.timings.get(stage)
        if not times:
            return {'count': 0, 'avg': 0.0, 'min': 0.0, 'max': 0.0, 'std_dev': 0.0}
        return {
            'count': len(times),
            'avg': statistics.mean(times),
            'min': min(times),
            'max': max(times),
            'std_dev': statistics.stdev(times) if len(times) > 1 else 0.0,
        }

    def get_all_statistics(self) -> Dict[str, Dict[str, float]]:
        return {name: self.get_statistics(name) for name in self.timings}

    def log_summary(self):
        for name, stats in sorted(self.get_all_statistics().items()):
            logger.info(
                f"{name}: n={stats['count']} avg={stats['avg']:.1f}ms "
                f"min={stats['min']:.1f}ms max={stats['max']:.1f}ms std={stats['std_dev']:.1f}ms")

    def clear(self):
        self.timings.clear()


_timer = PerformanceTimer()


def timed_function(stage: Optional[str] = None) -> Callable:
    """
    Decorator recording the wrapped function's run time in the global timer.

    Args:
        stage: Name used in reports; defaults to the function's __name__
    """
    def decorator(func):
        name = stage or func.__name__

        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                _timer.record(name, time.perf_counter() - start)

        return wrapper
    return decorator


def get_timer() -> PerformanceTimer:
    """Get the global timer instance."""
    return _timer
