"""Machine-readable benchmark reports with a stable text layout."""

from __future__ import annotations

from dataclasses import dataclass, field


def percentile(sorted_values, q: float):
    if not sorted_values:
        return 0.0
    idx = int(q * (len(sorted_values) - 1))
    return sorted_values[idx]


def latency_summary(samples_ns) -> dict:
    """avg/p95/p99 in microseconds from raw nanosecond samples."""
    if not samples_ns:
        return {"avg_us": 0.0, "p95_us": 0.0, "p99_us": 0.0}
    s = sorted(samples_ns)
    return {
        "avg_us": sum(s) / len(s) / 1000.0,
        "p95_us": percentile(s, 0.95) / 1000.0,
        "p99_us": percentile(s, 0.99) / 1000.0,
    }


@dataclass
class PhaseStats:
    name: str
    ops: int
    seconds: float
    counters: dict = field(default_factory=dict)

    @property
    def throughput(self) -> float:
        return self.ops / self.seconds if self.seconds > 0 else 0.0


@dataclass
class BenchReport:
    bench: str
    params: dict = field(default_factory=dict)
    phases: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def add_phase(self, name, ops, seconds, **counters) -> PhaseStats:
        phase = PhaseStats(name, ops, seconds, counters)
        self.phases.append(phase)
        return phase

    @staticmethod
    def _fmt(value):
        if isinstance(value, float):
            return f"{value:.6g}"
        return str(value)

    def to_text(self) -> str:
        lines = [f"[bench {self.bench}]"]
        for key in sorted(self.params):
            lines.append(f"{key} = {self._fmt(self.params[key])}")
        for phase in self.phases:
            lines.append(f"[phase {phase.name}]")
            lines.append(f"ops = {phase.ops}")
            lines.append(f"seconds = {phase.seconds:.6f}")
            lines.append(f"throughput_ops_per_sec = {phase.throughput:.3f}")
            for key in sorted(phase.counters):
                lines.append(f"{key} = {self._fmt(phase.counters[key])}")
        lines.append("[metrics]")
        for key in sorted(self.metrics):
            lines.append(f"{key} = {self._fmt(self.metrics[key])}")
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_text())
