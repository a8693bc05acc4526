"""Object-bounds sandbox simulator: tagged pointers, frame-based heap
layout, compiler-style check instrumentation, and an exact oracle."""

from .checks import CheckOutcome, CheckStats, Reason, access_check
from .heap import AllocationRecord, SimMemory
from .instrument import InstrumentedProgram, instrument, instrument_text
from .ir import ParseError, Program, parse, print_program
from .oracle import Verdict, differential
from .stats import StatsReport, build_report
from .tagging import Mode, compute_ea, strip_tag
from .verify import ValidationError, validate
from .vm import VM, RunResult, ViolationReport

__version__ = "0.1.0"

__all__ = [
    "AllocationRecord", "CheckOutcome", "CheckStats", "InstrumentedProgram",
    "Mode", "ParseError", "Program", "Reason", "RunResult", "SimMemory",
    "StatsReport", "VM", "ValidationError", "Verdict", "ViolationReport",
    "access_check", "build_report", "compute_ea", "differential",
    "instrument", "instrument_text", "parse", "print_program", "strip_tag",
    "validate", "__version__",
]
