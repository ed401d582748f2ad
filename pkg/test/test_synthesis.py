import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from model.covariance import CovarianceParams
from model.forward_model import SweepConfiguration, predict_trace
from sampling import AVAIL_TRACE_SOURCES
from sampling.csvsource import CsvTraceSource
from sampling.sampling import NonPositiveShotNoiseException, SamplingException, TraceFormatException
from sampling.synthesis import (
    MEASURED_COLUMNS,
    DetectionParams,
    MeasuredTrace,
    SyntheticSource,
    balanced_split,
    epr_combination,
    generate_dataset,
    normalized_noise,
    normalized_noise_from_series,
    phase_noise_family,
    samples_for_target,
    sweep_seed,
)

OMEGA = 20e6
SYNCHRONOUS = SweepConfiguration.MODE.SYNCHRONOUS


def short_config(mode=SYNCHRONOUS, points=21):
    return SweepConfiguration(mode, OMEGA, np.linspace(-6, 6, points))


def test_balanced_split():
    total, diff = balanced_split(3.0, 1.0, 1.0)
    assert total == diff
    total, diff = balanced_split(3.0, 2.0, 1.0)
    assert total / diff == pytest.approx(2.0)
    assert balanced_split(0.0, 2.0, 1.0) == (0.0, 0.0)
    with pytest.raises(ValueError):
        balanced_split(-1.0, 1.0, 1.0)


def test_normalized_noise():
    assert normalized_noise(2.4, 1.2) == pytest.approx(2.0)
    assert normalized_noise(5.0, 5.0, 1.0, 1.0) == pytest.approx(1.0)
    assert_allclose(normalized_noise([3.0, 4.0], [2.0, 2.0], 1.0), [2.0, 3.0])
    with pytest.raises(NonPositiveShotNoiseException):
        normalized_noise(5.0, 2.0, 1.0, 1.0)


def test_normalized_noise_from_series():
    rng = np.random.default_rng(5)
    x = rng.normal(scale=np.sqrt(2.0), size=400_000)
    v = rng.normal(size=400_000)
    e_1 = rng.normal(scale=0.3, size=400_000)
    e_2 = rng.normal(scale=0.3, size=400_000)
    value = normalized_noise_from_series(0.5 * (x + v) + e_1, 0.5 * (x - v) + e_2, 0.09, 0.09)
    assert value == pytest.approx(2.0, rel=2e-2)


def test_epr_combination():
    assert_allclose(epr_combination(1.0, 1.0, 1.0, 1.0, 0.0), (1.0, 1.0))
    plus, minus = epr_combination(10.44, 1.0, 11.04, 1.0, 10.1)
    assert minus == pytest.approx(0.64)
    assert plus == pytest.approx(20.84)
    plus, _ = epr_combination(12.51, 1.0, 12.0, 1.0, 0.57)
    assert plus == pytest.approx(12.825)
    # raw units with electronic noise give the same answer
    plus, minus = epr_combination(4 * 10.44 + 0.5, 4.5, 4 * 11.04 + 0.2, 4.2, 4 * 10.1, 0.5, 0.2)
    assert minus == pytest.approx(0.64)


@pytest.mark.parametrize("mode", list(SweepConfiguration.MODE))
def test_noiseless_dataset_matches_model(mode, paper_state, signal_cavity, idler_cavity):
    config = SweepConfiguration(mode, OMEGA)
    detection = DetectionParams(electronic_noise_s=0.3, electronic_noise_i=0.1, gain_imbalance=0.05, raw_gain=7.0)
    trace = generate_dataset(paper_state, signal_cavity, idler_cavity, config, detection, noiseless=True)
    model = predict_trace(paper_state, signal_cavity, idler_cavity, config)
    normalized = trace.normalized()
    assert_allclose(normalized.s_signal, model.s_signal, rtol=1e-12)
    assert_allclose(normalized.s_idler, model.s_idler, rtol=1e-12)
    assert_allclose(normalized.corr, model.corr, rtol=1e-12, atol=1e-12)
    assert trace.estimator_variances() is None
    assert trace.label == config.label


def test_dataset_is_deterministic(paper_state, signal_cavity, idler_cavity):
    detection = DetectionParams(electronic_noise_s=0.2, samples_per_point=500, rng_seed=42)
    a = generate_dataset(paper_state, signal_cavity, idler_cavity, short_config(), detection)
    b = generate_dataset(paper_state, signal_cavity, idler_cavity, short_config(), detection)
    c = generate_dataset(paper_state, signal_cavity, idler_cavity, short_config(), detection, threads=4)
    for column in MEASURED_COLUMNS:
        assert np.array_equal(getattr(a, column), getattr(b, column))
        assert np.array_equal(getattr(a, column), getattr(c, column))
    other = DetectionParams(electronic_noise_s=0.2, samples_per_point=500, rng_seed=43)
    d = generate_dataset(paper_state, signal_cavity, idler_cavity, short_config(), other)
    assert not np.array_equal(a.v_sum_s, d.v_sum_s)


def test_dataset_converges_to_model(paper_state, signal_cavity, idler_cavity):
    config = short_config(points=5)
    detection = DetectionParams(samples_per_point=100_000, rng_seed=1, raw_gain=3.0)
    normalized = generate_dataset(paper_state, signal_cavity, idler_cavity, config, detection).normalized()
    model = predict_trace(paper_state, signal_cavity, idler_cavity, config)
    assert_allclose(normalized.s_signal, model.s_signal, rtol=2e-2)
    assert_allclose(normalized.s_idler, model.s_idler, rtol=2e-2)
    assert_allclose(normalized.corr_re, model.corr_re, atol=0.3)
    assert_allclose(normalized.corr_im, model.corr_im, atol=0.3)


def test_vacuum_with_electronic_noise(vacuum_state, signal_cavity, idler_cavity):
    detection = DetectionParams(electronic_noise_s=0.5, electronic_noise_i=0.5, samples_per_point=20_000, rng_seed=9)
    trace = generate_dataset(vacuum_state, signal_cavity, idler_cavity, short_config(), detection)
    normalized = trace.normalized()
    variances = trace.estimator_variances()
    assert np.all(np.abs(normalized.s_signal - 1) < 5 * np.sqrt(variances["s_signal"]))
    assert np.all(np.abs(normalized.s_idler - 1) < 5 * np.sqrt(variances["s_idler"]))
    assert np.all(np.abs(normalized.corr_re) < 5 * np.sqrt(variances["corr_re"]))


@pytest.mark.slow
def test_estimator_is_unbiased(paper_state, signal_cavity, idler_cavity):
    config = short_config(points=3)
    model = predict_trace(paper_state, signal_cavity, idler_cavity, config)
    estimates = []
    for seed in range(100):
        detection = DetectionParams(electronic_noise_s=0.2, electronic_noise_i=0.2, samples_per_point=2000, rng_seed=seed)
        estimates.append(generate_dataset(paper_state, signal_cavity, idler_cavity, config, detection).normalized())
    for quantity in ("s_signal", "s_idler", "corr_re", "corr_im"):
        values = np.array([getattr(e, quantity) for e in estimates])
        standard_error = values.std(axis=0, ddof=1) / np.sqrt(len(values))
        assert np.all(np.abs(values.mean(axis=0) - getattr(model, quantity)) < 4 * standard_error)


def test_reported_variances_match_scatter(paper_state, signal_cavity, idler_cavity):
    config = short_config(points=2)
    values, predicted = [], []
    for seed in range(200):
        detection = DetectionParams(electronic_noise_s=0.3, samples_per_point=1000, rng_seed=seed)
        trace = generate_dataset(paper_state, signal_cavity, idler_cavity, config, detection)
        values.append(trace.normalized().s_signal)
        predicted.append(trace.estimator_variances()["s_signal"])
    ratio = np.var(values, axis=0, ddof=1) / np.mean(predicted, axis=0)
    assert np.all((ratio > 0.6) & (ratio < 1.6))


def test_electronic_noise_correction(paper_state, signal_cavity, idler_cavity):
    config = short_config()
    clean = generate_dataset(paper_state, signal_cavity, idler_cavity, config, DetectionParams(), noiseless=True)
    noisy = generate_dataset(
        paper_state,
        signal_cavity,
        idler_cavity,
        config,
        DetectionParams(electronic_noise_s=0.8, electronic_noise_i=0.4),
        noiseless=True,
    )
    assert_allclose(noisy.normalized().s_signal, clean.normalized().s_signal, rtol=1e-12)
    assert_allclose(noisy.normalized().corr, clean.normalized().corr, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("imbalance", [-0.1, 0.05, 0.1])
def test_gain_imbalance_is_matched(imbalance, paper_state, signal_cavity, idler_cavity):
    config = short_config(points=7)
    reference = generate_dataset(
        paper_state, signal_cavity, idler_cavity, config, DetectionParams(samples_per_point=2000, rng_seed=3)
    )
    imbalanced = generate_dataset(
        paper_state,
        signal_cavity,
        idler_cavity,
        config,
        DetectionParams(samples_per_point=2000, rng_seed=3, gain_imbalance=imbalance),
    )
    assert_allclose(imbalanced.normalized().s_signal, reference.normalized().s_signal, rtol=1e-10)
    assert_allclose(imbalanced.normalized().corr, reference.normalized().corr, rtol=1e-10, atol=1e-10)


def test_unphysical_point_is_clipped(caplog, signal_cavity, idler_cavity):
    state = CovarianceParams.vacuum().replace(mu=2.0)
    config = SweepConfiguration(SYNCHRONOUS, OMEGA, [-60.0, 60.0])
    with caplog.at_level(logging.WARNING):
        generate_dataset(state, signal_cavity, idler_cavity, config, DetectionParams(samples_per_point=100))
    assert "clipped" in caplog.text


def test_non_positive_shot_noise():
    trace = MeasuredTrace([0.0], [3.0], [1.0], [3.0], [2.0], [0.0], [0.0], e_s=1.0, e_i=0.5)
    with pytest.raises(NonPositiveShotNoiseException):
        trace.normalized()


def test_measured_trace_csv(tmp_path, paper_state, signal_cavity, idler_cavity):
    detection = DetectionParams(samples_per_point=300, rng_seed=7)
    trace = generate_dataset(paper_state, signal_cavity, idler_cavity, short_config(), detection)
    path = str(tmp_path / "trace_synchronous.csv")
    trace.to_csv(path)
    with open(path) as f:
        assert f.readline().strip() == ",".join(MEASURED_COLUMNS)
    assert (tmp_path / "trace_synchronous.json").exists()
    again = MeasuredTrace.from_csv(path)
    for column in MEASURED_COLUMNS:
        assert np.array_equal(getattr(again, column), getattr(trace, column))
    assert again.samples_per_point == 300
    assert again.metadata["seed"] == 7


def test_measured_trace_missing_column(tmp_path):
    path = tmp_path / "broken.csv"
    path.write_text("detuning,v_sum_s\n0,1\n")
    with pytest.raises(TraceFormatException):
        MeasuredTrace.from_csv(str(path))


def test_trace_sources(tmp_path, paper_state, signal_cavity, idler_cavity):
    assert set(AVAIL_TRACE_SOURCES) >= {"synthetic", "csv"}
    config = short_config(SweepConfiguration.MODE.IDLER_SWEEP)
    with SyntheticSource(paper_state, signal_cavity, idler_cavity, noiseless=True) as source:
        trace = source.read(config)
    trace.to_csv(str(tmp_path / "trace_idler-sweep.csv"))
    source = CsvTraceSource(str(tmp_path))
    assert source.available() == ["idler-sweep"]
    again = source.read(config)
    assert_allclose(again.normalized().s_idler, trace.normalized().s_idler)
    with pytest.raises(FileNotFoundError):
        source.read(short_config())


def test_phase_noise_family(paper_state):
    family = phase_noise_family(paper_state, [0.0, 1.0, 2.5])
    assert [state.beta_s for state in family] == pytest.approx([12.51, 13.51, 15.01])
    assert family[0] == paper_state
    with pytest.raises(ValueError):
        phase_noise_family(paper_state, [-1.0])


def test_samples_for_target():
    assert samples_for_target(1000, 0.06, 0.03) == 4000


def test_detection_params_validation():
    with pytest.raises(SamplingException):
        DetectionParams(electronic_noise_s=-1.0)
    with pytest.raises(SamplingException):
        DetectionParams(samples_per_point=0)
    with pytest.raises(SamplingException):
        DetectionParams(gain_imbalance=-1.0)
    detection = DetectionParams.from_dict({"electronic-noise-s": 0.2, "samples-per-point": 50}, rng_seed=4)
    assert detection.samples_per_point == 50 and detection.rng_seed == 4
    assert detection.recorded_noise("signal") == pytest.approx(0.4)


def test_synthetic_source_seeds(paper_state, signal_cavity, idler_cavity):
    assert len({sweep_seed(seed, mode) for seed in range(5) for mode in SweepConfiguration.MODE}) == 15
    detection = DetectionParams(samples_per_point=200, rng_seed=4)
    source = SyntheticSource(paper_state, signal_cavity, idler_cavity, detection)
    signal = source.read(short_config(SweepConfiguration.MODE.SIGNAL_SWEEP))
    idler = source.read(short_config(SweepConfiguration.MODE.IDLER_SWEEP))
    assert signal.metadata["seed"] == sweep_seed(4, SweepConfiguration.MODE.SIGNAL_SWEEP)
    assert idler.metadata["seed"] != signal.metadata["seed"]
    again = source.read(short_config(SweepConfiguration.MODE.SIGNAL_SWEEP))
    assert_array_equal(again.v_sum_s, signal.v_sum_s)
