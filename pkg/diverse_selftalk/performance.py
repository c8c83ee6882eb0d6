"""
Мониторинг производительности: время стадий и использование ресурсов.

Измерения только логируются и в артефакты запуска не попадают.
"""
import logging
import statistics
import threading
import time
from contextlib import contextmanager
from typing import Any, Dict, List, Optional

import psutil

from .models import ResourceUsage

logger = logging.getLogger(__name__)


class PerformanceMonitor:
    """Время выполнения именованных операций"""

    def __init__(self, memory_profiling: bool = True):
        self.memory_profiling = memory_profiling
        self.operation_metrics: Dict[str, Dict[str, Any]] = {}

    @contextmanager
    def measure_operation(self, operation_name: str):
        """Контекстный менеджер для измерения операции"""
        start_time = time.perf_counter()
        start_memory = self._get_memory_usage() if self.memory_profiling else 0.0
        success = False
        try:
            yield
            success = True
        finally:
            duration = time.perf_counter() - start_time
            memory_delta = (self._get_memory_usage() - start_memory) if self.memory_profiling else 0.0
            self._record_operation_metric(operation_name, duration, success, memory_delta)

    def _record_operation_metric(self, operation_name: str, duration: float, success: bool,
                                 memory_delta: float) -> None:
        metrics = self.operation_metrics.setdefault(operation_name, {
            'calls': 0,
            'failures': 0,
            'durations': [],
            'memory_deltas': [],
        })
        metrics['calls'] += 1
        metrics['failures'] += 0 if success else 1
        metrics['durations'].append(duration)
        metrics['memory_deltas'].append(memory_delta)

        status = "" if success else " (с ошибкой)"
        logger.info(f"Операция {operation_name}: {duration:.2f} с, память {memory_delta:+.1f} MB{status}")

    def get_metrics(self) -> Dict[str, Dict[str, float]]:
        summary = {}
        for name, metrics in self.operation_metrics.items():
            durations = metrics['durations']
            summary[name] = {
                'calls': metrics['calls'],
                'failures': metrics['failures'],
                'total_seconds': sum(durations),
                'mean_seconds': statistics.mean(durations),
                'max_seconds': max(durations),
                'max_memory_delta_mb': max(metrics['memory_deltas']),
            }
        return summary

    def log_summary(self) -> None:
        for name, stats in sorted(self.get_metrics().items()):
            logger.info(
                f"Итого {name}: вызовов {stats['calls']}, всего {stats['total_seconds']:.2f} с, "
                f"максимум {stats['max_seconds']:.2f} с"
            )

    def _get_memory_usage(self) -> float:
        return psutil.Process().memory_info().rss / (1024 * 1024)


class ResourceMonitor:
    """Фоновое наблюдение за памятью и CPU процесса"""

    def __init__(self, monitor_memory: bool = True, monitor_cpu: bool = True,
                 sampling_interval: float = 1.0):
        self.monitor_memory = monitor_memory
        self.monitor_cpu = monitor_cpu
        self.sampling_interval = sampling_interval

        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._samples: List[Dict[str, float]] = []
        self._initial_memory = 0.0
        self._process = psutil.Process()

    def start_monitoring(self) -> None:
        if self._thread is not None:
            return
        self._initial_memory = self._get_memory_usage()
        self._process.cpu_percent(interval=None)
        self._stop.clear()
        self._thread = threading.Thread(target=self._monitor_loop, name="resource-monitor", daemon=True)
        self._thread.start()
        logger.debug("Мониторинг ресурсов запущен")

    def stop_monitoring(self) -> ResourceUsage:
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None
        usage = self.get_resource_usage()
        logger.info(
            f"Ресурсы: память {usage.initial_memory_mb:.1f} → пик {usage.peak_memory_mb:.1f} MB, "
            f"CPU в среднем {usage.average_cpu_percent:.1f}%, пик {usage.peak_cpu_percent:.1f}%"
        )
        return usage

    def _monitor_loop(self) -> None:
        while not self._stop.is_set():
            try:
                self._sample()
            except psutil.Error as e:
                logger.error(f"Ошибка мониторинга ресурсов: {e}")
            self._stop.wait(self.sampling_interval)
        self._sample()

    def _sample(self) -> None:
        sample = {'timestamp': time.monotonic()}
        if self.monitor_memory:
            sample['memory_mb'] = self._get_memory_usage()
        if self.monitor_cpu:
            sample['cpu_percent'] = self._process.cpu_percent(interval=None)
        self._samples.append(sample)
        if len(self._samples) > 1000:
            self._samples = self._samples[-500:]

    def get_resource_usage(self) -> ResourceUsage:
        memory_values = [s['memory_mb'] for s in self._samples if 'memory_mb' in s]
        cpu_values = [s['cpu_percent'] for s in self._samples if 'cpu_percent' in s]
        duration = 0.0
        if len(self._samples) >= 2:
            duration = self._samples[-1]['timestamp'] - self._samples[0]['timestamp']
        return ResourceUsage(
            initial_memory_mb=self._initial_memory,
            peak_memory_mb=max(memory_values, default=self._initial_memory),
            average_memory_mb=statistics.mean(memory_values) if memory_values else self._initial_memory,
            peak_cpu_percent=max(cpu_values, default=0.0),
            average_cpu_percent=statistics.mean(cpu_values) if cpu_values else 0.0,
            duration_seconds=duration,
        )

    def _get_memory_usage(self) -> float:
        return self._process.memory_info().rss / (1024 * 1024)

    def __enter__(self) -> "ResourceMonitor":
        self.start_monitoring()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.stop_monitoring()
