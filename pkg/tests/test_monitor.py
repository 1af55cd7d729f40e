"""Streaming monitor, trace I/O, and descriptor series plumbing."""

import numpy as np
import pytest

from actspec import rmt
from actspec.errors import ConfigError, ContractError, DegenerateInputError
from actspec.features import FEATURE_NAMES, build_descriptor
from actspec.linalg import Window, window_spectrum
from actspec.monitor import (
    ActivationTrace,
    StreamMonitor,
    feature_stats,
    read_traces_jsonl,
    run_trace,
    standardize_series,
    truncate_series,
    write_descriptor_csv,
    write_traces_jsonl,
)
from actspec.rng import make_rng, normal


def make_trace(length=60, dim=12, seed=0, label="factual", trace_id="tr"):
    tokens = normal(make_rng(seed), (length, dim))
    return ActivationTrace(trace_id=trace_id, label=label, tokens=tokens)


class TestStreamMonitor:
    def test_minimum_window_enforced(self):
        with pytest.raises(ConfigError):
            StreamMonitor(window_len=3)
        StreamMonitor(window_len=4)

    def test_warmup_emits_nothing(self):
        monitor = StreamMonitor(window_len=30)
        trace = make_trace(length=29)
        for token in trace.tokens:
            assert monitor.push(token) is None

    def test_knee_configuration_constructs(self):
        assert StreamMonitor(window_len=25).window_len == 25

    def test_first_emission_matches_batch_descriptor(self):
        trace = make_trace(length=30, dim=8, seed=1)
        monitor = StreamMonitor(window_len=30)
        out = None
        for token in trace.tokens:
            out = monitor.push(token)
        window = Window(trace.tokens)
        evals = window_spectrum(window).eigenvalues
        baseline = rmt.fit_mp_sigma(evals, window.aspect, 0.5)
        expected = build_descriptor(window, baseline)
        assert np.array_equal(out.to_array(), expected.to_array())

    def test_dimension_mismatch(self):
        monitor = StreamMonitor(window_len=4)
        monitor.push(np.zeros(5))
        with pytest.raises(ContractError):
            monitor.push(np.zeros(6))

    def test_external_baseline_policy(self):
        baseline = rmt.MPModel.from_variance(1.0, 8 / 20)
        trace = make_trace(length=25, dim=8, seed=2)
        series = run_trace(trace, window_len=20, baseline=baseline)
        assert len(series.steps) == 6
        monitor = StreamMonitor(window_len=20, baseline=baseline)
        assert monitor.baseline is baseline

    def test_state_size_is_bounded(self):
        monitor = StreamMonitor(window_len=10)
        trace = make_trace(length=200, dim=8, seed=3)
        monitor.push(trace.tokens[0])
        nbytes = monitor._buffer.nbytes
        for token in trace.tokens[1:]:
            monitor.push(token)
        assert monitor._buffer.nbytes == nbytes
        assert monitor._buffer.shape == (10, 8)


class TestRunTrace:
    def test_descriptor_count_law(self):
        trace = make_trace(length=100, dim=10, seed=4)
        series = run_trace(trace, window_len=30)
        assert len(series.steps) == 71

    def test_streaming_equals_batch_bitwise(self):
        trace = make_trace(length=70, dim=9, seed=5)
        series = run_trace(trace, window_len=20)
        monitor = StreamMonitor(window_len=20)
        streamed = []
        for token in trace.tokens:
            d = monitor.push(token)
            if d is not None:
                streamed.append(d)
        assert len(streamed) == len(series.steps)
        for a, b in zip(streamed, series.steps):
            assert np.array_equal(a.to_array(), b.to_array())

    def test_identical_tokens_identical_series(self):
        t1 = make_trace(seed=6)
        t2 = ActivationTrace("other", t1.label, t1.tokens.copy())
        s1 = run_trace(t1, window_len=15)
        s2 = run_trace(t2, window_len=15)
        assert np.array_equal(s1.matrix(), s2.matrix())

    def test_short_trace_error_names_requirement(self):
        trace = make_trace(length=10)
        with pytest.raises(DegenerateInputError, match="at least 30"):
            run_trace(trace, window_len=30)

    def test_label_and_meta_passthrough(self):
        trace = make_trace(label="hallucinated")
        trace.meta["split"] = "val"
        series = run_trace(trace, window_len=15)
        assert series.label == "hallucinated"
        assert series.risk_label == 1
        assert series.meta["split"] == "val"


class TestTruncate:
    def test_identity(self):
        series = run_trace(make_trace(length=50, seed=7), window_len=20)
        full = truncate_series(series, 50)
        assert len(full.steps) == len(series.steps)

    def test_single_descriptor(self):
        series = run_trace(make_trace(length=50, seed=8), window_len=20)
        first = truncate_series(series, 20)
        assert len(first.steps) == 1
        assert np.array_equal(first.steps[0].to_array(), series.steps[0].to_array())

    def test_below_window_rejected(self):
        series = run_trace(make_trace(length=50, seed=9), window_len=20)
        with pytest.raises(ConfigError):
            truncate_series(series, 19)

    def test_count_law(self):
        series = run_trace(make_trace(length=50, seed=10), window_len=20)
        assert len(truncate_series(series, 35).steps) == 16


class TestStandardization:
    def test_stats_and_zscoring(self):
        series = [
            run_trace(make_trace(seed=s, trace_id=f"t{s}"), window_len=15)
            for s in range(3)
        ]
        mean, std = feature_stats(series)
        assert mean.shape == std.shape == (len(FEATURE_NAMES),)
        z = standardize_series(series[0], mean, std)
        assert z.standardization is not None
        stacked = np.concatenate([standardize_series(s, mean, std).matrix() for s in series])
        assert np.max(np.abs(stacked.mean(axis=0))) <= 1e-9
        assert np.all(np.isfinite(stacked))

    def test_double_standardization_rejected(self):
        series = run_trace(make_trace(seed=11), window_len=15)
        mean, std = feature_stats([series])
        z = standardize_series(series, mean, std)
        with pytest.raises(ContractError):
            standardize_series(z, mean, std)


class TestTraceIO:
    def test_jsonl_roundtrip(self, tmp_path):
        traces = [make_trace(seed=s, trace_id=f"t{s}") for s in range(3)]
        traces[0].meta["split"] = "train"
        path = tmp_path / "traces.jsonl"
        write_traces_jsonl(traces, path)
        loaded = read_traces_jsonl(path)
        assert len(loaded) == 3
        for a, b in zip(traces, loaded):
            assert a.trace_id == b.trace_id
            assert a.label == b.label
            assert np.array_equal(a.tokens, b.tokens)
            assert a.meta == b.meta

    def test_malformed_line_names_line_number(self, tmp_path):
        traces = [make_trace(seed=s, trace_id=f"t{s}") for s in range(3)]
        path = tmp_path / "traces.jsonl"
        write_traces_jsonl(traces, path)
        lines = path.read_text().split("\n")
        lines[1] = '{"broken": true'
        path.write_text("\n".join(lines))
        with pytest.raises(ConfigError, match="line 2"):
            read_traces_jsonl(path)

    def test_unknown_label_rejected(self):
        with pytest.raises(ConfigError):
            ActivationTrace("x", "bogus", np.zeros((5, 3)))

    def test_descriptor_csv_format(self, tmp_path):
        series = [
            run_trace(make_trace(length=20, seed=s, trace_id=f"t{s}"), window_len=15)
            for s in range(2)
        ]
        path = tmp_path / "descriptors.csv"
        write_descriptor_csv(series, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "trace_id,step,label," + ",".join(FEATURE_NAMES)
        assert len(lines) == 1 + 2 * 6
        first = lines[1].split(",")
        assert first[0] == "t0"
        assert first[1] == "15"  # tokens consumed at first emission
        assert first[2] == "factual"
        # values round-trip through repr
        assert float(first[3]) == series[0].steps[0].entropy
