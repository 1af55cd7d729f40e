"""Per-window spectral descriptors against a fitted MP baseline.

A window's covariance spectrum is boiled down to ten numbers: spectral
entropy (dispersion), leading-eigenvalue mass (concentration), eigengap
ratios (low-rank structure), two divergences from the MP noise reference
(KL on a histogram, 1-Wasserstein on CDFs), the outlier count above the
bulk edge, and the top eigenvalue.  The field order below is frozen; it is
the feature-vector contract for CSV export and the recurrent risk head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .linalg import Window, window_spectrum
from .rmt import MPModel, count_outliers, mp_cdf, mp_quantile_grid

__all__ = [
    "FeatureConfig",
    "SpectralDescriptor",
    "FEATURE_NAMES",
    "spectral_entropy",
    "leading_mass",
    "eigengaps",
    "kl_to_mp",
    "wasserstein_to_mp",
    "build_descriptor",
]

FEATURE_NAMES: tuple[str, ...] = (
    "entropy",
    "entropy_normalized",
    "leading_mass_1",
    "leading_mass_k",
    "max_eigengap_ratio",
    "top_gap_ratio",
    "kl_to_mp",
    "wasserstein_to_mp",
    "outlier_count",
    "top_eigenvalue",
)

KL_SMOOTHING = 1e-9


@dataclass(frozen=True)
class FeatureConfig:
    """Knobs for descriptor construction.

    ``histogram_bins`` defaults to 32 so a 30-token window's handful of
    nonzero eigenvalues still meets a non-empty reference histogram;
    ``centered`` defaults off to match the uncentered covariance baseline.
    """

    leading_k: int = 5
    histogram_bins: int = 32
    centered: bool = False
    eigengap_floor: float = 1e-12
    outlier_margin: float = 0.0

    def __post_init__(self):
        if self.leading_k < 1:
            raise ConfigError(f"leading_k must be >= 1, got {self.leading_k}")
        if self.histogram_bins < 8:
            raise ConfigError(
                f"histogram_bins must be >= 8, got {self.histogram_bins}"
            )
        if not (self.eigengap_floor > 0.0):
            raise ConfigError("eigengap_floor must be positive")
        if self.outlier_margin < 0.0:
            raise ConfigError("outlier_margin must be nonnegative")


@dataclass(frozen=True)
class SpectralDescriptor:
    """One window's descriptor vector; field order matches FEATURE_NAMES."""

    entropy: float
    entropy_normalized: float
    leading_mass_1: float
    leading_mass_k: float
    max_eigengap_ratio: float
    top_gap_ratio: float
    kl_to_mp: float
    wasserstein_to_mp: float
    outlier_count: int
    top_eigenvalue: float

    def to_array(self) -> np.ndarray:
        return np.array([float(getattr(self, name)) for name in FEATURE_NAMES])


def _validate_descending(ev: np.ndarray) -> np.ndarray:
    ev = np.asarray(ev, dtype=float)
    if ev.ndim != 1 or ev.size == 0:
        raise DegenerateInputError(f"need a 1-D eigenvalue list, got {ev.shape}")
    if np.any(np.diff(ev) > 0):
        raise DegenerateInputError("eigenvalues must be sorted descending")
    return ev


def spectral_entropy(eigenvalues: np.ndarray) -> tuple[float, float]:
    """Shannon entropy of the normalized positive spectrum, in nats.

    Returns (entropy, entropy / ln(number of positive eigenvalues)); a
    single positive eigenvalue yields (0, 0) by convention.
    """
    ev = _validate_descending(eigenvalues)
    positive = ev[ev > 0.0]
    if positive.size == 0:
        raise DegenerateInputError("all-zero spectrum has no entropy")
    if positive.size == 1:
        return 0.0, 0.0
    p = positive / positive.sum()
    entropy = float(-(p * np.log(p)).sum())
    return entropy, entropy / float(np.log(positive.size))


def leading_mass(eigenvalues: np.ndarray, k: int) -> float:
    """Fraction of total eigenvalue mass in the top k eigenvalues."""
    ev = _validate_descending(eigenvalues)
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    total = ev.sum()
    if total <= 0.0:
        raise DegenerateInputError("zero total mass")
    if k >= ev.size:
        return 1.0
    return float(ev[:k].sum() / total)


def eigengaps(
    eigenvalues: np.ndarray, floor: float = 1e-12
) -> tuple[float, int, float]:
    """Consecutive-eigenvalue ratios, floored to avoid division blowup.

    Returns (max ratio, index of the max, top ratio lambda_1/lambda_2) with
    each ratio max(l_i, floor) / max(l_{i+1}, floor).
    """
    ev = _validate_descending(eigenvalues)
    if ev.size < 2:
        raise DegenerateInputError("need at least 2 eigenvalues for gaps")
    clipped = np.maximum(ev, floor)
    ratios = clipped[:-1] / clipped[1:]
    argmax = int(np.argmax(ratios))
    return float(ratios[argmax]), argmax, float(ratios[0])


def kl_to_mp(
    eigenvalues: np.ndarray,
    model: MPModel,
    bins: int | np.ndarray = 32,
    weights: np.ndarray | None = None,
) -> float:
    """KL divergence of the empirical spectrum histogram from the MP law.

    The empirical histogram P and the MP reference Q live on the same
    equal-width bins over [0, 1.05 * max(lambda_+, lambda_max)] (or on
    explicit bin edges passed via ``bins``); for aspect > 1 the MP point
    mass at zero lands in the first bin.  Both are smoothed by 1e-9 and
    renormalized before computing sum P ln(P/Q).  Optional ``weights`` give
    eigenvalues non-uniform histogram mass.
    """
    ev = _validate_descending(eigenvalues)
    if isinstance(bins, (int, np.integer)):
        if bins < 8:
            raise ConfigError(f"bins must be >= 8, got {bins}")
        hi = 1.05 * max(model.lambda_plus, float(ev.max()))
        edges = np.linspace(0.0, hi, int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=float)
        if edges.ndim != 1 or edges.size < 9 or np.any(np.diff(edges) <= 0):
            raise ConfigError("explicit bin edges must be increasing, >= 8 bins")
    p_raw, _ = np.histogram(ev, bins=edges, weights=weights)
    p_raw = p_raw.astype(float)
    cdf_at_edges = mp_cdf(edges, model)
    q_raw = np.diff(cdf_at_edges)
    if edges[0] <= 0.0:
        q_raw = q_raw.copy()
        q_raw[0] += float(mp_cdf(edges[0], model))
    p = p_raw + KL_SMOOTHING
    q = q_raw + KL_SMOOTHING
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def wasserstein_to_mp(eigenvalues: np.ndarray, model: MPModel) -> float:
    """1-Wasserstein distance between the empirical spectrum and the MP law.

    Computed as the integral of |F_emp - F_MP| accumulated trapezoidally on
    the merged grid of eigenvalues, the 512 MP quantile points (scaled by
    sigma^2), and the bulk edges.  Within each segment the empirical CDF is
    the exact step value and the MP CDF is its chord, with the absolute
    value split at the crossing, so translations of mass beyond the bulk
    integrate exactly.  Includes the MP point mass at zero for aspect > 1.
    """
    ev = _validate_descending(eigenvalues)
    _, unit_q = mp_quantile_grid(model.aspect)
    grid = np.concatenate(
        [
            ev,
            unit_q * model.sigma_sq,
            [0.0, model.lambda_minus, model.lambda_plus, float(ev.max())],
        ]
    )
    grid = np.unique(grid[grid >= 0.0])
    f_mp = np.asarray(mp_cdf(grid, model), dtype=float)
    sorted_ev = np.sort(ev)
    f_emp = np.searchsorted(sorted_ev, grid, side="right") / ev.size
    h = np.diff(grid)
    a = f_mp[:-1] - f_emp[:-1]
    b = f_mp[1:] - f_emp[:-1]
    crossing = a * b < 0.0
    trapezoid = 0.5 * h * (np.abs(a) + np.abs(b))
    split = 0.5 * h * (a * a + b * b) / np.where(crossing, np.abs(b - a), 1.0)
    return float(np.sum(np.where(crossing, split, trapezoid)))


def build_descriptor(
    window: Window,
    baseline: MPModel,
    config: FeatureConfig = FeatureConfig(),
) -> SpectralDescriptor:
    """Full descriptor of one window against a frozen MP baseline.

    Composes covariance -> eigendecomposition -> the five descriptor
    families plus outlier count and top eigenvalue.  Deterministic: the
    same window and baseline produce a bit-identical descriptor.
    """
    spectrum = window_spectrum(window, centered=config.centered)
    ev = spectrum.eigenvalues
    entropy, entropy_norm = spectral_entropy(ev)
    mass_1 = leading_mass(ev, 1)
    mass_k = leading_mass(ev, config.leading_k)
    max_gap, _, top_gap = eigengaps(ev, config.eigengap_floor)
    kl = kl_to_mp(ev, baseline, config.histogram_bins)
    w1 = wasserstein_to_mp(ev, baseline)
    outliers = count_outliers(ev, baseline, config.outlier_margin)
    return SpectralDescriptor(
        entropy=entropy,
        entropy_normalized=entropy_norm,
        leading_mass_1=mass_1,
        leading_mass_k=mass_k,
        max_eigengap_ratio=max_gap,
        top_gap_ratio=top_gap,
        kl_to_mp=kl,
        wasserstein_to_mp=w1,
        outlier_count=outliers,
        top_eigenvalue=float(ev[0]),
    )
