import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing

import numpy as np
import yaml
from tabulate import tabulate

logger = logging.getLogger(__name__)


class TomographyException(Exception):
    pass


def to_db(variance):
    """variance in shot-noise units -> dB relative to shot noise"""
    return 10.0 * np.log10(variance)


def from_db(value_db):
    return 10.0 ** (np.asarray(value_db, dtype=float) / 10.0)


def load_config(path) -> dict:
    """
    Reads a configuration file. The format is picked from the extension:
    .json (default), .toml, .yaml/.yml
    """
    ext = os.path.splitext(path)[1].lower()
    logger.info("Reading configuration from <%s>", path)
    if ext == ".toml":
        with open(path, "rb") as f:
            return tomllib.load(f)
    with open(path, "r", encoding="utf-8") as f:
        if ext in (".yaml", ".yml"):
            return yaml.safe_load(f)
        return json.load(f)


def write_json(path, content: dict):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(content, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.debug("wrote %s", path)


class ReportLog(object):
    """
    Plain-text report, appended to a file as sections are produced.
    """

    HEADER = """## Sideband tomography report
State: {state}
Analysis frequency: {omega_mhz:.3f} MHz
Detection efficiency: {efficiency}

"""

    def __init__(self, path=None):
        self._path = path
        self.content = ""

    @property
    def path(self):
        return self._path

    def get_header(self, state="", omega_hz=float("nan"), efficiency=None):
        if efficiency is None:
            eff = "not corrected"
        else:
            eff = ", ".join(f"{e:.3f}" for e in np.atleast_1d(efficiency))
        return self.HEADER.format(
            state=state, omega_mhz=omega_hz * 1e-6, efficiency=eff
        )

    @staticmethod
    def table(rows: typing.List[typing.List], headers: typing.List[str], floatfmt=".4f"):
        return tabulate(rows, headers=headers, tablefmt="github", floatfmt=floatfmt)

    def append(self, text):
        if not text:
            return
        text += "\n" if text[-1] != "\n" else ""  # ensure line ends with newline
        self.content += text
        if self._path is not None:
            folder = os.path.dirname(self._path)
            if folder:
                os.makedirs(folder, exist_ok=True)
            with open(self._path, "a+", encoding="utf-8") as f:
                f.write(text)

    def write_section(self, title, body):
        self.append(f"=== {title} ===\n{body}\n")



def find_extrema(values, delta, x=None):
    """
    Local maxima and minima of a sampled curve. A point is a maximum when it
    is the largest value since the curve last rose by more than delta, and is
    followed by a drop of more than delta (minima alike).

    :return: (maxima, minima), arrays of (x, value) rows
    """
    values = np.asarray(values, dtype=float)
    x = np.arange(values.size) if x is None else np.asarray(x, dtype=float)
    if values.shape != x.shape:
        raise ValueError("values and x must have the same length")
    if not np.isscalar(delta) or delta < 0:
        raise ValueError("delta must be a non-negative scalar")

    maxima, minima = [], []
    low, high = np.inf, -np.inf
    low_at, high_at = np.nan, np.nan
    rising = True
    for position, value in zip(x, values):
        if value > high:
            high, high_at = value, position
        if value < low:
            low, low_at = value, position
        if rising and value < high - delta:
            maxima.append((high_at, high))
            low, low_at = value, position
            rising = False
        elif not rising and value > low + delta:
            minima.append((low_at, low))
            high, high_at = value, position
            rising = True
    return np.array(maxima).reshape(-1, 2), np.array(minima).reshape(-1, 2)
