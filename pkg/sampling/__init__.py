AVAIL_TRACE_SOURCES = {}

try:
    from .synthesis import SyntheticSource

    AVAIL_TRACE_SOURCES["synthetic"] = SyntheticSource
except ModuleNotFoundError:
    pass

try:
    from .csvsource import CsvTraceSource

    AVAIL_TRACE_SOURCES["csv"] = CsvTraceSource
except ModuleNotFoundError:
    pass
