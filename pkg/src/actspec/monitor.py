"""Streaming descriptor extraction over activation traces.

A ``StreamMonitor`` keeps a ring buffer of the last N activation vectors.
Once the buffer fills, an MP baseline is fitted to the first full window
(median-quantile fit) and frozen; every push from then on emits one
``SpectralDescriptor`` for the current window against that baseline.  The
warm-up phase emits nothing -- padding would fabricate spectra.

Batch processing (``run_trace``) is literally the streaming loop, so the
two are bit-identical by construction.  Traces travel as JSON Lines (one
object per trace) and descriptor series export to CSV with a fixed column
order; both formats are documented in the README.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DegenerateInputError
from .features import (
    FEATURE_NAMES,
    FeatureConfig,
    SpectralDescriptor,
    build_descriptor,
)
from .linalg import Window, window_spectrum
from .rmt import MPModel, fit_mp_sigma

__all__ = [
    "TRACE_LABELS",
    "POSITIVE_LABELS",
    "ActivationTrace",
    "DescriptorSeries",
    "StreamMonitor",
    "run_trace",
    "truncate_series",
    "feature_stats",
    "standardize_series",
    "read_traces_jsonl",
    "write_traces_jsonl",
    "write_descriptor_csv",
]

TRACE_LABELS = (
    "factual",
    "hallucinated",
    "in_distribution",
    "out_of_distribution",
    "unlabeled",
)
POSITIVE_LABELS = frozenset({"hallucinated", "out_of_distribution"})

MIN_WINDOW_LEN = 4
DEFAULT_WINDOW_LEN = 30
BASELINE_QUANTILE = 0.5
STD_FLOOR = 1e-8


@dataclass
class ActivationTrace:
    """A labeled sequence of per-token activation vectors."""

    trace_id: str
    label: str
    tokens: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.tokens, dtype=float)
        if arr.ndim != 2:
            raise ContractError(
                f"trace tokens must be (T, dim), got shape {arr.shape}"
            )
        if self.label not in TRACE_LABELS:
            raise ConfigError(
                f"unknown label {self.label!r}; expected one of {TRACE_LABELS}"
            )
        self.tokens = arr

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def risk_label(self) -> int:
        """Binary target: 1 for hallucinated / out-of-distribution."""
        return int(self.label in POSITIVE_LABELS)


@dataclass
class DescriptorSeries:
    """Descriptor time series for one trace.

    ``standardization`` records the per-feature (mean, std) pairs applied to
    ``steps`` (None when the series is raw); ``meta`` passes the trace
    metadata through, including the train/val/test split tag when present.
    """

    trace_id: str
    label: str
    steps: list[SpectralDescriptor]
    window_len: int
    standardization: tuple[np.ndarray, np.ndarray] | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def matrix(self) -> np.ndarray:
        """Feature matrix of shape (len(steps), 10) in FEATURE_NAMES order."""
        return np.array([d.to_array() for d in self.steps])

    @property
    def risk_label(self) -> int:
        return int(self.label in POSITIVE_LABELS)


class StreamMonitor:
    """Sliding-window monitor emitting one descriptor per token step.

    ``baseline`` may be a pre-fitted ``MPModel`` (external policy, for
    ingested traces with a known noise floor); the default policy fits the
    baseline from the first full window and freezes it, which requires an
    activation dimension of at least 8 (the minimum spectrum size the fit
    accepts).  Per-token work is constant for fixed (window_len, dim): the
    ring buffer never grows.
    """

    def __init__(
        self,
        window_len: int = DEFAULT_WINDOW_LEN,
        config: FeatureConfig | None = None,
        baseline: MPModel | None = None,
        baseline_quantile: float = BASELINE_QUANTILE,
    ):
        if window_len < MIN_WINDOW_LEN:
            raise ConfigError(
                f"window_len must be >= {MIN_WINDOW_LEN}, got {window_len}"
            )
        self.window_len = int(window_len)
        self.config = config if config is not None else FeatureConfig()
        self.baseline = baseline
        self.baseline_quantile = baseline_quantile
        self._buffer: np.ndarray | None = None
        self._pos = 0
        self._count = 0

    @property
    def dim(self) -> int | None:
        return None if self._buffer is None else self._buffer.shape[1]

    def _window(self) -> Window:
        buf = self._buffer
        if self._count < self.window_len:
            raise ContractError("window not yet full")
        ordered = np.concatenate([buf[self._pos :], buf[: self._pos]])
        return Window(ordered)

    def push(self, activation: np.ndarray) -> SpectralDescriptor | None:
        """Advance the window by one token; emit a descriptor once warm."""
        vec = np.asarray(activation, dtype=float)
        if vec.ndim != 1:
            raise ContractError(f"activation must be 1-D, got shape {vec.shape}")
        if self._buffer is None:
            self._buffer = np.zeros((self.window_len, vec.size))
        elif vec.size != self._buffer.shape[1]:
            raise ContractError(
                f"activation dimension {vec.size} does not match "
                f"established dimension {self._buffer.shape[1]}"
            )
        self._buffer[self._pos] = vec
        self._pos = (self._pos + 1) % self.window_len
        self._count += 1
        if self._count < self.window_len:
            return None
        window = self._window()
        if self.baseline is None:
            evals = window_spectrum(window, centered=self.config.centered).eigenvalues
            self.baseline = fit_mp_sigma(
                evals, window.aspect, self.baseline_quantile
            )
        return build_descriptor(window, self.baseline, self.config)


def run_trace(
    trace: ActivationTrace,
    window_len: int = DEFAULT_WINDOW_LEN,
    config: FeatureConfig | None = None,
    baseline: MPModel | None = None,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> DescriptorSeries:
    """Batch descriptor extraction: the streaming loop applied to a trace.

    ``stats`` optionally applies per-feature z-scoring with (mean, std)
    computed elsewhere (training split); the applied pairs are recorded on
    the series.
    """
    if trace.length < window_len:
        raise DegenerateInputError(
            f"trace {trace.trace_id!r} has {trace.length} tokens; "
            f"window_len={window_len} requires at least {window_len}"
        )
    monitor = StreamMonitor(window_len=window_len, config=config, baseline=baseline)
    steps: list[SpectralDescriptor] = []
    for token in trace.tokens:
        descriptor = monitor.push(token)
        if descriptor is not None:
            steps.append(descriptor)
    series = DescriptorSeries(
        trace_id=trace.trace_id,
        label=trace.label,
        steps=steps,
        window_len=window_len,
        meta=dict(trace.meta),
    )
    if stats is not None:
        series = standardize_series(series, stats[0], stats[1])
    return series


def truncate_series(series: DescriptorSeries, max_tokens: int) -> DescriptorSeries:
    """Keep only descriptors computed from the first ``max_tokens`` tokens."""
    if max_tokens < series.window_len:
        raise ConfigError(
            f"max_tokens={max_tokens} is below window_len={series.window_len}"
        )
    keep = min(len(series.steps), max_tokens - series.window_len + 1)
    return DescriptorSeries(
        trace_id=series.trace_id,
        label=series.label,
        steps=series.steps[:keep],
        window_len=series.window_len,
        standardization=series.standardization,
        meta=dict(series.meta),
    )


def feature_stats(
    series_list: list[DescriptorSeries],
) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std over every step of the given series.

    Stds are floored at 1e-8 so downstream z-scoring stays finite.
    """
    if not series_list:
        raise DegenerateInputError("no series to compute statistics from")
    stacked = np.concatenate([s.matrix() for s in series_list], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return mean, std


def standardize_series(
    series: DescriptorSeries, mean: np.ndarray, std: np.ndarray
) -> DescriptorSeries:
    """Z-score every descriptor of a series with the given statistics."""
    if series.standardization is not None:
        raise ContractError("series is already standardized")
    std = np.maximum(np.asarray(std, dtype=float), STD_FLOOR)
    steps = []
    for d in series.steps:
        z = (d.to_array() - mean) / std
        steps.append(
            SpectralDescriptor(
                **{name: float(z[i]) for i, name in enumerate(FEATURE_NAMES)}
            )
        )
    return DescriptorSeries(
        trace_id=series.trace_id,
        label=series.label,
        steps=steps,
        window_len=series.window_len,
        standardization=(np.asarray(mean, dtype=float), std),
        meta=dict(series.meta),
    )


def write_traces_jsonl(traces: list[ActivationTrace], path: str | Path) -> None:
    """Write traces as JSON Lines: one object per trace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for trace in traces:
            record = {
                "trace_id": trace.trace_id,
                "label": trace.label,
                "dim": trace.dim,
                "tokens": [[float(v) for v in row] for row in trace.tokens],
                "meta": dict(trace.meta),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_traces_jsonl(path: str | Path) -> list[ActivationTrace]:
    """Read a JSONL trace file; malformed lines raise with their number."""
    path = Path(path)
    traces: list[ActivationTrace] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                tokens = np.asarray(record["tokens"], dtype=float)
                if tokens.ndim != 2 or tokens.shape[1] != int(record["dim"]):
                    raise ValueError("token array does not match declared dim")
                trace = ActivationTrace(
                    trace_id=str(record["trace_id"]),
                    label=str(record["label"]),
                    tokens=tokens,
                    meta={str(k): str(v) for k, v in record.get("meta", {}).items()},
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ConfigError(
                    f"{path}: malformed trace on line {lineno}: {exc}"
                ) from exc
            traces.append(trace)
    return traces


def write_descriptor_csv(
    series_list: list[DescriptorSeries], path: str | Path
) -> None:
    """Export descriptor series as CSV.

    Columns: trace_id, step, label, then the ten features in FEATURE_NAMES
    order.  ``step`` is the number of tokens consumed when the descriptor
    was emitted (window_len for the first row of each trace).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "trace_id,step,label," + ",".join(FEATURE_NAMES)
    lines = [header]
    for series in series_list:
        for i, d in enumerate(series.steps):
            step = series.window_len + i
            values = ",".join(repr(float(v)) for v in d.to_array())
            lines.append(f"{series.trace_id},{step},{series.label},{values}")
    path.write_text("\n".join(lines) + "\n")
