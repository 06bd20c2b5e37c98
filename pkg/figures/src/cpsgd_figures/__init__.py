"""Figure rendering for simulator trace CSVs."""

from .plotting import (
    EmptyTrace,
    PlotSpec,
    SchemaMismatch,
    TRACE_COLUMNS,
    load_trace,
    render,
)

__version__ = "0.1.0"
