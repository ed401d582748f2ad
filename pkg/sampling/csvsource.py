import logging
import os

from .sampling import TraceFormatException, TraceSource
from .synthesis import MeasuredTrace

logger = logging.getLogger(__name__)


class CsvTraceSource(TraceSource):
    """
    Reads traces written by `simulate` (or by the acquisition software) from a
    folder, one file per configuration named <prefix><label>.csv
    """

    def __init__(self, folder=".", prefix="trace_"):
        self._folder = folder
        self._prefix = prefix
        if not os.path.isdir(folder):
            raise FileNotFoundError(f"trace folder <{folder}> does not exist")
        logger.debug("created CsvTraceSource(folder=%s, prefix=%s)", folder, prefix)

    def path(self, label):
        return os.path.join(self._folder, f"{self._prefix}{label}.csv")

    def available(self):
        labels = []
        for name in sorted(os.listdir(self._folder)):
            if name.startswith(self._prefix) and name.endswith(".csv"):
                labels.append(name[len(self._prefix) : -len(".csv")])
        return labels

    def read(self, config):
        path = self.path(config.label)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"no trace for configuration {config.label} in <{self._folder}>")
        trace = MeasuredTrace.from_csv(path)
        if trace.label and trace.label != config.label:
            raise TraceFormatException(f"{path} holds a {trace.label} trace, expected {config.label}")
        trace.metadata.setdefault("mode", config.label)
        return trace
