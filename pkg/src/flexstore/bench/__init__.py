"""Benchmark harness: baseline indexes, workloads, runners, reports."""

from .baseline import BaselineBPlusTree, SortedArrayIndex
from .report import BenchReport, PhaseStats
from .workload import SIZE_PRESETS, YCSB_MIXES, WorkloadSpec

__all__ = [
    "BaselineBPlusTree",
    "SortedArrayIndex",
    "BenchReport",
    "PhaseStats",
    "WorkloadSpec",
    "SIZE_PRESETS",
    "YCSB_MIXES",
]
