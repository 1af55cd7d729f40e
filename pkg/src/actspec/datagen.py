"""Deterministic synthetic generators for traces and classification data.

Activation traces are drawn from a spiked Gaussian population whose spike
strengths may vary over time: structured traces keep them constant, drifting
traces decay them geometrically toward pure noise, and noise traces never
have them.  All randomness for one trace is drawn as a single Gaussian block
up front, so traces generated from the same seed but different drift modes
share their underlying noise -- a structured trace and its decayed twin
differ only by the spike schedule, which makes paired comparisons sharp.

Defaults are tuned for testability (spikes far above the detachment
threshold, decay spanning roughly one 30-token window), not for fidelity to
any particular model's activations.

The mixture dataset is a desk-scale stand-in for text/image classification:
Gaussian blobs around class centers in a low-dimensional space, linearly
embedded into a wider space so hidden activations have compressible
structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .monitor import ActivationTrace
from .rmt import SpikeSpec
from .rng import child_seed, make_rng, normal

__all__ = [
    "TraceGenConfig",
    "MixtureDatasetConfig",
    "MixtureDataset",
    "orthonormal_directions",
    "default_trace_config",
    "gen_trace",
    "gen_trace_corpus",
    "gen_mixture_dataset",
    "write_mixture_csv",
    "read_mixture_csv",
]

DRIFT_MODES = ("stay_structured", "decay_to_noise", "stay_noise")
# all above the detachment threshold ~2.16 at the default window aspect, yet
# weak enough that a single window cannot separate the classes reliably
DEFAULT_STRENGTHS = (10.0, 7.0, 5.0, 4.0, 3.0)
DEFAULT_DECAY_RATE = 0.03
DEFAULT_OOD_SIGMA_SQ = 1.5
SPLIT_FRACTIONS = (0.70, 0.15)  # train, val; remainder is test

# tags for child_seed derivation (documented splitting rule)
_TAG_DIRECTIONS = 101
_TAG_CLASS_BASE = 1000


@dataclass(frozen=True)
class TraceGenConfig:
    """One trace's generator settings."""

    dim: int
    length: int
    sigma_sq: float
    spikes: tuple[SpikeSpec, ...]
    drift_mode: str
    decay_rate: float
    seed: int

    def __post_init__(self):
        if self.dim < max(2, len(self.spikes)):
            raise ConfigError(
                f"dim={self.dim} too small for {len(self.spikes)} spikes"
            )
        if self.length < 1:
            raise ConfigError(f"length must be >= 1, got {self.length}")
        if not (self.sigma_sq > 0.0):
            raise ConfigError(f"sigma_sq must be positive, got {self.sigma_sq}")
        if self.drift_mode not in DRIFT_MODES:
            raise ConfigError(
                f"unknown drift_mode {self.drift_mode!r}; expected {DRIFT_MODES}"
            )
        if not (0.0 < self.decay_rate <= 1.0):
            raise ConfigError(
                f"decay_rate must be in (0, 1], got {self.decay_rate}"
            )


@dataclass(frozen=True)
class MixtureDatasetConfig:
    """Gaussian-mixture classification dataset settings."""

    classes: int = 8
    dim: int = 16
    samples_per_class: int = 500
    center_scale: float = 2.0
    noise_std: float = 0.3
    embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.classes}")
        if self.embed_dim < self.dim:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must be >= dim ({self.dim})"
            )
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.noise_std < 0.0:
            raise ConfigError("noise_std must be nonnegative")


@dataclass
class MixtureDataset:
    """Embedded mixture samples plus a stratified 70/15/15 split."""

    inputs: np.ndarray
    labels: np.ndarray
    split: dict[str, np.ndarray]
    config: MixtureDatasetConfig | None = None

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.split[name]
        return self.inputs[idx], self.labels[idx]


def orthonormal_directions(dim: int, count: int, seed: int) -> list[np.ndarray]:
    """Deterministic orthonormal direction set from a seeded QR factorization."""
    if count > dim:
        raise ConfigError(f"cannot fit {count} orthonormal directions in R^{dim}")
    rng = make_rng(seed)
    g = normal(rng, (dim, count))
    q, r = np.linalg.qr(g)
    # fix signs so the factorization is unique
    q = q * np.sign(np.where(np.diag(r) == 0.0, 1.0, np.diag(r)))
    return [q[:, i].copy() for i in range(count)]


def default_trace_config(
    seed: int,
    dim: int = 40,
    length: int = 120,
    sigma_sq: float = 1.0,
    strengths: tuple[float, ...] = DEFAULT_STRENGTHS,
    drift_mode: str = "stay_structured",
    decay_rate: float = DEFAULT_DECAY_RATE,
) -> TraceGenConfig:
    """Template config with QR-orthonormal spike directions derived from
    ``child_seed(seed, 101)``; spike strengths default well above the
    detachment threshold so structured traces are unambiguous."""
    directions = orthonormal_directions(
        dim, len(strengths), child_seed(seed, _TAG_DIRECTIONS)
    )
    spikes = tuple(
        SpikeSpec(strength=s, direction=d) for s, d in zip(strengths, directions)
    )
    return TraceGenConfig(
        dim=dim,
        length=length,
        sigma_sq=sigma_sq,
        spikes=spikes,
        drift_mode=drift_mode,
        decay_rate=decay_rate,
        seed=seed,
    )


def _spike_schedule(config: TraceGenConfig) -> np.ndarray:
    """Per-token spike strengths theta_i(t), shape (length, n_spikes)."""
    strengths = np.array([s.strength for s in config.spikes])
    t = np.arange(config.length)[:, None]
    if config.drift_mode == "stay_structured":
        return np.broadcast_to(strengths, (config.length, strengths.size)).copy()
    if config.drift_mode == "stay_noise":
        return np.zeros((config.length, strengths.size))
    return strengths * (1.0 - config.decay_rate) ** t


def _mode_label(mode: str) -> str:
    return "factual" if mode == "stay_structured" else "hallucinated"


def gen_trace(
    config: TraceGenConfig,
    trace_id: str | None = None,
    label: str | None = None,
) -> ActivationTrace:
    """Generate one trace; token t ~ N(0, sigma^2 I + sum theta_i(t) u_i u_i^T).

    The label defaults to "factual" for stay_structured and "hallucinated"
    otherwise; pass ``label`` explicitly for OOD-style corpora.  The whole
    Gaussian block (length x (dim + n_spikes)) is drawn before assembly, so
    same-seed traces share noise across drift modes and spike scalings.
    """
    rng = make_rng(config.seed)
    k = len(config.spikes)
    g = normal(rng, (config.length, config.dim + k))
    tokens = math.sqrt(config.sigma_sq) * g[:, : config.dim]
    if k:
        schedule = _spike_schedule(config)  # (T, k)
        coeffs = np.sqrt(schedule) * g[:, config.dim :]
        directions = np.stack([s.direction for s in config.spikes])  # (k, dim)
        tokens = tokens + coeffs @ directions
    return ActivationTrace(
        trace_id=trace_id if trace_id is not None else f"trace-{config.seed}",
        label=label if label is not None else _mode_label(config.drift_mode),
        tokens=tokens,
        meta={"drift_mode": config.drift_mode, "seed": str(config.seed)},
    )


def _split_for_index(i: int, n: int) -> str:
    n_train = int(SPLIT_FRACTIONS[0] * n)
    n_val = int(SPLIT_FRACTIONS[1] * n)
    if i < n_train:
        return "train"
    if i < n_train + n_val:
        return "val"
    return "test"


def gen_trace_corpus(
    n_per_class: int,
    template: TraceGenConfig,
    seed: int,
    kind: str = "hallucination",
    ood_sigma_sq: float = DEFAULT_OOD_SIGMA_SQ,
) -> list[ActivationTrace]:
    """Balanced two-class trace corpus with stamped train/val/test splits.

    ``kind="hallucination"`` pairs stay_structured ("factual") with
    decay_to_noise ("hallucinated"); ``kind="ood"`` pairs stay_structured
    ("in_distribution") with stay_noise at ``ood_sigma_sq``
    ("out_of_distribution").  Per-trace seeds follow the documented rule
    ``child_seed(seed, 1000 + class_index, trace_index)``; splits are
    stratified 70/15/15 by trace index.  Spike directions come from the
    template, so the population structure is shared across the corpus.
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if kind == "hallucination":
        class_specs = [
            ("stay_structured", "factual", template.sigma_sq),
            ("decay_to_noise", "hallucinated", template.sigma_sq),
        ]
    elif kind == "ood":
        class_specs = [
            ("stay_structured", "in_distribution", template.sigma_sq),
            ("stay_noise", "out_of_distribution", ood_sigma_sq),
        ]
    else:
        raise ConfigError(f"unknown corpus kind {kind!r}")
    corpus: list[ActivationTrace] = []
    for class_index, (mode, label, sigma_sq) in enumerate(class_specs):
        for i in range(n_per_class):
            cfg = replace(
                template,
                drift_mode=mode,
                sigma_sq=sigma_sq,
                seed=child_seed(seed, _TAG_CLASS_BASE + class_index, i),
            )
            trace = gen_trace(cfg, trace_id=f"{label}-{i:04d}", label=label)
            trace.meta["split"] = _split_for_index(i, n_per_class)
            corpus.append(trace)
    return corpus


def gen_mixture_dataset(config: MixtureDatasetConfig) -> MixtureDataset:
    """Gaussian mixture on a sphere, embedded into a wider space.

    Class centers are drawn once on the radius-``center_scale`` sphere in
    ``dim`` dimensions; samples add isotropic noise and are pushed through a
    fixed random orthonormal-columns map into ``embed_dim``.  The split is
    stratified 70/15/15 per class and deterministic.
    """
    rng = make_rng(child_seed(config.seed, 1))
    centers = normal(rng, (config.classes, config.dim))
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("degenerate zero-norm class center")
    centers = config.center_scale * centers / norms

    embed = np.stack(
        orthonormal_directions(
            config.embed_dim, config.dim, child_seed(config.seed, 2)
        ),
        axis=1,
    )  # (embed_dim, dim), orthonormal columns

    n = config.classes * config.samples_per_class
    low = np.empty((n, config.dim))
    labels = np.empty(n, dtype=int)
    sample_rng = make_rng(child_seed(config.seed, 3))
    for cls in range(config.classes):
        block = slice(cls * config.samples_per_class, (cls + 1) * config.samples_per_class)
        noise = normal(sample_rng, (config.samples_per_class, config.dim))
        low[block] = centers[cls] + config.noise_std * noise
        labels[block] = cls

    inputs = low @ embed.T

    m = config.samples_per_class
    n_train = int(SPLIT_FRACTIONS[0] * m)
    n_val = int(SPLIT_FRACTIONS[1] * m)
    train, val, test = [], [], []
    for cls in range(config.classes):
        base = cls * m
        train.extend(range(base, base + n_train))
        val.extend(range(base + n_train, base + n_train + n_val))
        test.extend(range(base + n_train + n_val, base + m))
    split = {
        "train": np.array(train, dtype=int),
        "val": np.array(val, dtype=int),
        "test": np.array(test, dtype=int),
    }
    return MixtureDataset(inputs=inputs, labels=labels, split=split, config=config)


def write_mixture_csv(dataset: MixtureDataset, path: str | Path) -> None:
    """CSV export: one row per sample, features then label then split."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    width = dataset.inputs.shape[1]
    header = ",".join(f"f{i}" for i in range(width)) + ",label,split"
    split_of = np.empty(dataset.inputs.shape[0], dtype=object)
    for name, idx in dataset.split.items():
        split_of[idx] = name
    lines = [header]
    for row, label, split_name in zip(dataset.inputs, dataset.labels, split_of):
        values = ",".join(repr(float(v)) for v in row)
        lines.append(f"{values},{int(label)},{split_name}")
    path.write_text("\n".join(lines) + "\n")


def read_mixture_csv(path: str | Path) -> MixtureDataset:
    """Read a mixture CSV back into arrays and split indices."""
    path = Path(path)
    lines = path.read_text().strip().split("\n")
    if not lines or not lines[0].startswith("f0,"):
        raise ConfigError(f"{path}: not a mixture dataset CSV")
    rows, labels, split_names = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        try:
            rows.append([float(v) for v in parts[:-2]])
            labels.append(int(parts[-2]))
            split_names.append(parts[-1])
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"{path}: malformed row on line {lineno}") from exc
    inputs = np.asarray(rows)
    labels_arr = np.asarray(labels, dtype=int)
    split = {
        name: np.flatnonzero(np.array(split_names) == name)
        for name in ("train", "val", "test")
    }
    return MixtureDataset(inputs=inputs, labels=labels_arr, split=split)
