from .models import BenchParams, RunReport, TraceRecord, WorkloadKind, WorkloadSpec
from .workload import data_ptr_for, generate, preload_records, read_trace, write_trace
from .runner import (
    ACCURACY_CASES, INDEXES, SWEEP_FIELDS, ShadowOracle, accuracy, build_index, replay, run_workload, sweep,
)
