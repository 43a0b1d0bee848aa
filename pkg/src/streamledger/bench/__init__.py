"""Workloads, the closed-loop driver, and run reports."""
from .driver import INPROC, SOCKET, Session, Target, bulk_load, run_closed_loop
from .harness import BenchResult, fabric_profile, run_benchmark
from .report import CSV_COLUMNS, OpRecord, RunReport, aggregate, read_csv, recompute_from_csv
from .workload import PRESETS, Operation, WorkloadSpec, gen_scm, gen_ycsb, generate, preset

__all__ = [
    "CSV_COLUMNS", "INPROC", "PRESETS", "SOCKET", "BenchResult", "OpRecord", "Operation",
    "RunReport", "Session", "Target", "WorkloadSpec", "aggregate", "bulk_load", "fabric_profile",
    "gen_scm", "gen_ycsb", "generate", "preset", "read_csv", "recompute_from_csv",
    "run_benchmark", "run_closed_loop",
]
