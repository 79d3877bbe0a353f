"""Metrics collection utilities"""
import threading
import time
from collections import defaultdict
from typing import Dict


class MetricsCollector:
    """Collects counters, timings and peaks for inference and training runs"""

    def __init__(self):
        self._lock = threading.Lock()
        self.metrics = defaultdict(list)
        self.counters = defaultdict(int)
        self.peaks: Dict[str, float] = {}
        self.timers: Dict[str, float] = {}

    def increment(self, metric: str, value: int = 1):
        """Increment a counter metric"""
        with self._lock:
            self.counters[metric] += value

    def record(self, metric: str, value: float):
        """Record a value for aggregation"""
        with self._lock:
            self.metrics[metric].append(float(value))

    def record_peak(self, metric: str, value: float):
        """Keep the running maximum of a metric"""
        with self._lock:
            if value > self.peaks.get(metric, float("-inf")):
                self.peaks[metric] = float(value)

    def start_timer(self, timer_name: str):
        """Start a timer"""
        self.timers[timer_name] = time.perf_counter()

    def stop_timer(self, timer_name: str) -> float:
        """Stop a timer and return duration in seconds"""
        if timer_name not in self.timers:
            return 0.0

        duration = time.perf_counter() - self.timers.pop(timer_name)

        # Record the duration
        self.record(f"{timer_name}_duration", duration)

        return duration

    def get_counter(self, metric: str) -> int:
        return self.counters.get(metric, 0)

    def get_peak(self, metric: str) -> float:
        return self.peaks.get(metric, 0.0)

    def get_summary(self) -> Dict:
        """Get metrics summary"""
        summary = {
            'counters': dict(self.counters),
            'peaks': dict(self.peaks),
            'aggregates': {}
        }

        # Calculate aggregates
        for metric, nums in self.metrics.items():
            if nums:
                summary['aggregates'][metric] = {
                    'count': len(nums),
                    'sum': sum(nums),
                    'avg': sum(nums) / len(nums),
                    'min': min(nums),
                    'max': max(nums)
                }

        return summary

    def reset(self):
        """Clear all collected metrics"""
        with self._lock:
            self.metrics.clear()
            self.counters.clear()
            self.peaks.clear()
            self.timers.clear()


# Global metrics instance
metrics = MetricsCollector()
