"""Figure generation for granubed timing and benchmark CSVs."""

from .figures import FigureSpec, plot_scaling, plot_trace, read_export, render
from .schema import (ATS_HEADER, SIZES_HEADER, TRACE_HEADER, WEAK_HEADER,
                     SchemaError, read_csv)

__version__ = "0.1.0"
