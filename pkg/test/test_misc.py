import numpy as np
import pytest
from numpy.testing import assert_allclose

from misc import ReportLog, find_extrema, from_db, load_config, to_db, write_json


def test_db_conversions():
    assert to_db(10.0) == pytest.approx(10.0)
    assert to_db(0.5) == pytest.approx(-3.0103, abs=1e-4)
    assert_allclose(from_db(to_db(np.array([0.2, 1.0, 7.0]))), [0.2, 1.0, 7.0])


def test_find_extrema():
    x = np.linspace(0, 4 * np.pi, 2001)
    maxima, minima = find_extrema(np.sin(x), 0.5, x=x)
    assert_allclose(maxima[:, 0], [np.pi / 2, 5 * np.pi / 2], atol=1e-2)
    assert_allclose(minima[:, 0], [3 * np.pi / 2, 7 * np.pi / 2], atol=1e-2)
    assert_allclose(maxima[:, 1], 1.0, atol=1e-5)


def test_find_extrema_ignores_small_wiggles():
    values = np.array([0.0, 1.0, 0.95, 1.0, 0.0, -1.0, 0.0])
    maxima, minima = find_extrema(values, 0.2)
    assert maxima.shape == (1, 2)
    assert maxima[0, 0] == 1
    assert minima.tolist() == [[5.0, -1.0]]
    assert find_extrema(np.zeros(5), 0.1)[0].shape == (0, 2)


def test_find_extrema_arguments():
    with pytest.raises(ValueError):
        find_extrema([1, 2, 3], 0.1, x=[0, 1])
    with pytest.raises(ValueError):
        find_extrema([1, 2, 3], -0.1)


def test_config_formats(tmp_path):
    write_json(str(tmp_path / "sub" / "a.json"), {"seed": 1})
    assert load_config(str(tmp_path / "sub" / "a.json")) == {"seed": 1}
    (tmp_path / "b.yml").write_text("seed: 2\n")
    assert load_config(str(tmp_path / "b.yml")) == {"seed": 2}
    (tmp_path / "c.toml").write_text("seed = 3\n")
    assert load_config(str(tmp_path / "c.toml")) == {"seed": 3}


def test_report_log(tmp_path):
    path = tmp_path / "report.txt"
    log = ReportLog(str(path))
    log.append(log.get_header("paper", 20e6, (0.7, 0.5)))
    log.write_section("Numbers", log.table([["a", 1.0]], ["name", "value"]))
    log.append("")
    text = path.read_text()
    assert text == log.content
    assert "20.000 MHz" in text
    assert "0.700, 0.500" in text
    assert "=== Numbers ===" in text
    assert "not corrected" in ReportLog().get_header()
