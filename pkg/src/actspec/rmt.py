"""Marchenko-Pastur null model, spiked-covariance sampling, and outlier logic.

The MP law is the noise reference every other module compares against: for an
n x p matrix of i.i.d. entries with variance sigma^2 and aspect c = p/n, the
eigenvalues of C = (1/n) X^T X concentrate on a bulk
[sigma^2 (1 - sqrt(c))^2, sigma^2 (1 + sqrt(c))^2].  Eigenvalues beyond the
upper edge are treated as signal ("outliers"); planted signal directions are
modelled by the spiked covariance Sigma = sigma^2 I + sum_i theta_i u_i u_i^T.

The MP CDF has no closed form used here; it is integrated by adaptive Simpson
quadrature (absolute tolerance 1e-8) after the substitution
lambda = lambda_- + (lambda_+ - lambda_-) sin^2 t, which removes the
square-root edge singularities so the quadrature is applied to an analytic
integrand.  The continuous part is normalized so the CDF is exactly 1 at the
upper edge.  For aspect > 1 the law has a point mass 1 - 1/c at zero, which
the CDF includes and the density function does not.

Unit-variance quantiles are precomputed per aspect (bisection on the CDF to
1e-8) and cached to a JSON file keyed by the aspect rounded to 1e-6; the
location defaults to ``~/.cache/actspec`` and can be overridden with the
``ACTSPEC_CACHE_DIR`` environment variable.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError
from .rng import make_rng, normal

__all__ = [
    "MPModel",
    "SpikeSpec",
    "mp_bulk_edges",
    "mp_density",
    "mp_cdf",
    "mp_quantile",
    "mp_quantile_grid",
    "fit_mp_sigma",
    "bbp_threshold",
    "count_outliers",
    "sample_spiked_population",
]

EDGE_REL_TOL = 1e-12
UNIT_NORM_TOL = 1e-10
SPIKE_ORTHO_TOL = 1e-8
QUANTILE_GRID_POINTS = 512
QUANTILE_XTOL = 1e-8
_CDF_PANELS = 1024
_CDF_ABS_TOL = 1e-8


def mp_bulk_edges(sigma_sq: float, aspect: float) -> tuple[float, float]:
    """Bulk edges sigma^2 (1 -/+ sqrt(c))^2 of the MP law."""
    if not (sigma_sq > 0.0) or not (aspect > 0.0):
        raise DomainError(
            f"sigma_sq and aspect must be positive, got {sigma_sq}, {aspect}"
        )
    root = math.sqrt(aspect)
    return sigma_sq * (1.0 - root) ** 2, sigma_sq * (1.0 + root) ** 2


@dataclass(frozen=True)
class MPModel:
    """Fitted MP parameters: noise variance, aspect ratio, and bulk edges."""

    sigma_sq: float
    aspect: float
    lambda_minus: float
    lambda_plus: float

    def __post_init__(self):
        lo, hi = mp_bulk_edges(self.sigma_sq, self.aspect)
        scale = max(abs(hi), 1e-300)
        if abs(self.lambda_minus - lo) > EDGE_REL_TOL * scale or abs(
            self.lambda_plus - hi
        ) > EDGE_REL_TOL * scale:
            raise ContractError(
                "bulk edges are inconsistent with sigma_sq and aspect"
            )
        if not (0.0 <= self.lambda_minus < self.lambda_plus):
            raise ContractError("edges must satisfy 0 <= lambda_- < lambda_+")

    @classmethod
    def from_variance(cls, sigma_sq: float, aspect: float) -> "MPModel":
        lo, hi = mp_bulk_edges(sigma_sq, aspect)
        return cls(sigma_sq=sigma_sq, aspect=aspect, lambda_minus=lo, lambda_plus=hi)

    @property
    def zero_mass(self) -> float:
        """Point mass at zero, 1 - 1/c for aspect c > 1, else 0."""
        return max(0.0, 1.0 - 1.0 / self.aspect)


@dataclass(frozen=True)
class SpikeSpec:
    """One planted signal direction: strength theta and a unit vector."""

    strength: float
    direction: np.ndarray

    def __post_init__(self):
        if not (self.strength > 0.0):
            raise DomainError(f"spike strength must be positive, got {self.strength}")
        vec = np.asarray(self.direction, dtype=float)
        if vec.ndim != 1:
            raise ContractError("spike direction must be a 1-D vector")
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ContractError(
                f"spike direction must be unit length within 1e-10, |.|={norm!r}"
            )
        object.__setattr__(self, "direction", vec)


def mp_density(lam, model: MPModel):
    """Absolutely-continuous MP density, zero outside [lambda_-, lambda_+].

    For aspect > 1 this is only the continuous part (total mass 1/c); the
    point mass at zero lives in ``mp_cdf``.  At lambda = 0 with aspect >= 1
    the density diverges; +inf is returned there.
    """
    arr = np.asarray(lam, dtype=float)
    lo, hi = model.lambda_minus, model.lambda_plus
    inside = (arr > lo) & (arr < hi)
    out = np.zeros_like(arr)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.sqrt(
            np.clip((hi - arr) * (arr - lo), 0.0, None)
        ) / (2.0 * np.pi * model.sigma_sq * model.aspect * arr)
    out[inside] = vals[inside]
    if lo == 0.0:
        out = np.where(arr == 0.0, np.inf, out)
    if np.isscalar(lam) or np.ndim(lam) == 0:
        return float(out)
    return out


def _adaptive_simpson(f, a: float, b: float, tol: float) -> float:
    """Classic adaptive Simpson with Richardson acceptance on each split."""
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    stack = [(a, b, fa, fb, fm, whole, tol, 0)]
    total = 0.0
    while stack:
        a, b, fa, fb, fm, whole, tol, depth = stack.pop()
        m = 0.5 * (a + b)
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if depth >= 40 or abs(left + right - whole) <= 15.0 * tol:
            total += left + right + (left + right - whole) / 15.0
        else:
            stack.append((a, m, fa, fm, flm, left, tol / 2.0, depth + 1))
            stack.append((m, b, fm, fb, frm, right, tol / 2.0, depth + 1))
    return total


class _UnitMP:
    """Unit-variance MP CDF machinery for a single aspect ratio.

    A cumulative table over uniform panels in the substituted variable t is
    built once (each panel by adaptive Simpson); point evaluations add a
    single-panel Simpson remainder, which is far below tolerance because
    panels are ~1.5e-3 wide and the substituted integrand is analytic.
    """

    def __init__(self, aspect: float):
        self.aspect = aspect
        self.lam_minus, self.lam_plus = mp_bulk_edges(1.0, aspect)
        self.span = self.lam_plus - self.lam_minus
        self.zero_mass = max(0.0, 1.0 - 1.0 / aspect)
        t = np.linspace(0.0, np.pi / 2.0, _CDF_PANELS + 1)
        panel_tol = _CDF_ABS_TOL / _CDF_PANELS
        panels = [
            _adaptive_simpson(self._g_scalar, t[i], t[i + 1], panel_tol)
            for i in range(_CDF_PANELS)
        ]
        self._t_nodes = t
        self._cum = np.concatenate([[0.0], np.cumsum(panels)])
        self._total = float(self._cum[-1])

    # integrand of the CDF after lambda = lam_- + span * sin^2 t
    def _g(self, t):
        s2 = np.sin(t) ** 2
        c2 = np.cos(t) ** 2
        if self.lam_minus == 0.0:
            return self.span * c2 / (np.pi * self.aspect)
        lam = self.lam_minus + self.span * s2
        return (self.span * self.span) * s2 * c2 / (np.pi * self.aspect * lam)

    def _g_scalar(self, t: float) -> float:
        return float(self._g(t))

    def cont_cdf(self, x: np.ndarray) -> np.ndarray:
        """CDF of the continuous part alone, normalized to [0, 1]."""
        x = np.asarray(x, dtype=float)
        u = np.clip((x - self.lam_minus) / self.span, 0.0, 1.0)
        t = np.arcsin(np.sqrt(u))
        idx = np.searchsorted(self._t_nodes, t, side="right") - 1
        idx = np.clip(idx, 0, _CDF_PANELS - 1)
        t0 = self._t_nodes[idx]
        mid = 0.5 * (t0 + t)
        rem = (t - t0) / 6.0 * (self._g(t0) + 4.0 * self._g(mid) + self._g(t))
        res = np.clip((self._cum[idx] + rem) / self._total, 0.0, 1.0)
        res = np.where(x >= self.lam_plus, 1.0, res)
        return np.where(x <= self.lam_minus, 0.0, res)

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """Full unit-variance CDF including the point mass at zero."""
        x = np.asarray(x, dtype=float)
        cont = self.cont_cdf(x)
        w0 = self.zero_mass
        return np.where(x < 0.0, 0.0, w0 + (1.0 - w0) * cont)

    def cont_quantile(self, probs: np.ndarray) -> np.ndarray:
        """Invert the continuous-part CDF by bisection to 1e-8."""
        p = np.asarray(probs, dtype=float)
        lo = np.full(p.shape, self.lam_minus)
        hi = np.full(p.shape, self.lam_plus)
        while np.max(hi - lo) > QUANTILE_XTOL:
            mid = 0.5 * (lo + hi)
            below = self.cont_cdf(mid) < p
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)


_UNIT_TABLES: dict[str, _UnitMP] = {}
_QUANTILE_CACHE: dict[str, np.ndarray] | None = None


def _aspect_key(aspect: float) -> str:
    return f"{aspect:.6f}"


def _unit_mp(aspect: float) -> _UnitMP:
    key = _aspect_key(aspect)
    table = _UNIT_TABLES.get(key)
    if table is None:
        table = _UnitMP(aspect)
        _UNIT_TABLES[key] = table
    return table


def _cache_file() -> Path:
    root = os.environ.get("ACTSPEC_CACHE_DIR")
    base = Path(root) if root else Path.home() / ".cache" / "actspec"
    return base / "mp_quantiles.json"


def _load_quantile_cache() -> dict[str, np.ndarray]:
    global _QUANTILE_CACHE
    if _QUANTILE_CACHE is None:
        _QUANTILE_CACHE = {}
        path = _cache_file()
        if path.is_file():
            try:
                raw = json.loads(path.read_text())
                for key, vals in raw.get("tables", {}).items():
                    _QUANTILE_CACHE[key] = np.asarray(vals, dtype=float)
            except (json.JSONDecodeError, OSError):
                _QUANTILE_CACHE = {}
    return _QUANTILE_CACHE


def _persist_quantile_cache() -> None:
    cache = _load_quantile_cache()
    path = _cache_file()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": 1,
            "points": QUANTILE_GRID_POINTS,
            "tables": {k: list(map(float, v)) for k, v in sorted(cache.items())},
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)
    except OSError:
        pass  # cache is best-effort; recomputation is cheap


def mp_quantile_grid(aspect: float) -> tuple[np.ndarray, np.ndarray]:
    """Unit-variance quantiles of the MP continuous part on a fixed grid.

    Returns (probs, values) with probs[j] = (j + 0.5) / 512.  Values are
    cached in memory and persisted to the JSON cache file per aspect key.
    """
    if not (aspect > 0.0):
        raise DomainError(f"aspect must be positive, got {aspect}")
    probs = (np.arange(QUANTILE_GRID_POINTS) + 0.5) / QUANTILE_GRID_POINTS
    cache = _load_quantile_cache()
    key = _aspect_key(aspect)
    vals = cache.get(key)
    if vals is None or len(vals) != QUANTILE_GRID_POINTS:
        vals = _unit_mp(aspect).cont_quantile(probs)
        cache[key] = vals
        _persist_quantile_cache()
    return probs, vals


def mp_quantile(aspect: float, prob: float) -> float:
    """Unit-variance quantile of the MP continuous part by bisection."""
    if not (0.0 < prob < 1.0):
        raise DomainError(f"quantile probability must be in (0,1), got {prob}")
    table = _unit_mp(aspect)
    return float(table.cont_quantile(np.asarray([prob]))[0])


def mp_cdf(lam, model: MPModel):
    """MP CDF, point mass at zero included for aspect > 1.

    Quadrature-backed; monotone nondecreasing, exactly 0 below the support
    and exactly 1 at and above the upper edge.
    """
    table = _unit_mp(model.aspect)
    arr = np.asarray(lam, dtype=float) / model.sigma_sq
    out = table.cdf(arr)
    if np.isscalar(lam) or np.ndim(lam) == 0:
        return float(out)
    return out


def fit_mp_sigma(
    eigenvalues: np.ndarray, aspect: float, quantile: float = 0.5
) -> MPModel:
    """Quantile-matched MP fit of the noise variance.

    sigma^2 is the ratio of the q-th empirical quantile of the strictly
    positive eigenvalues to the same quantile of the unit-variance MP bulk,
    so a pure-noise spectrum recovers sigma^2 = 1 and the estimator is
    exactly scale-equivariant.  Quantiles are taken conditional on the
    positive part so rank-deficient spectra (aspect > 1 appends structural
    zeros) keep the default median well-defined.
    """
    ev = np.asarray(eigenvalues, dtype=float)
    if ev.ndim != 1 or ev.size < 8:
        raise DegenerateInputError(
            f"need at least 8 eigenvalues to fit, got shape {ev.shape}"
        )
    if np.any(np.diff(ev) > 0):
        raise ContractError("eigenvalues must be sorted descending")
    if not (0.0 < quantile < 1.0):
        raise DomainError(f"quantile must be in (0,1), got {quantile}")
    positive = ev[ev > 0.0]
    if positive.size == 0:
        raise DegenerateInputError("all eigenvalues are zero; nothing to fit")
    emp = float(np.quantile(positive, quantile))
    ref = mp_quantile(aspect, quantile)
    return MPModel.from_variance(emp / ref, aspect)


def bbp_threshold(sigma_sq: float, aspect: float) -> float:
    """Spike-strength detachment threshold sigma^2 (1 + sqrt(c)).

    Used as a labeling aid when choosing planted spike strengths; no
    decision logic depends on the convention.
    """
    if not (sigma_sq > 0.0) or not (aspect > 0.0):
        raise DomainError(
            f"sigma_sq and aspect must be positive, got {sigma_sq}, {aspect}"
        )
    return sigma_sq * (1.0 + math.sqrt(aspect))


def count_outliers(
    eigenvalues: np.ndarray, model: MPModel, margin: float = 0.0
) -> int:
    """Number of eigenvalues strictly above lambda_+ * (1 + margin)."""
    ev = np.asarray(eigenvalues, dtype=float)
    if ev.ndim != 1:
        raise ContractError(f"eigenvalues must be 1-D, got shape {ev.shape}")
    if np.any(np.diff(ev) > 0):
        raise ContractError("eigenvalues must be sorted descending")
    if margin < 0.0:
        raise DomainError(f"margin must be nonnegative, got {margin}")
    return int(np.sum(ev > model.lambda_plus * (1.0 + margin)))


def _check_orthonormal_spikes(spikes: list[SpikeSpec], dim: int) -> None:
    if len(spikes) > dim:
        raise ContractError(
            f"{len(spikes)} spikes do not fit in dimension {dim}"
        )
    for i, a in enumerate(spikes):
        if a.direction.shape != (dim,):
            raise ContractError(
                f"spike {i} has dimension {a.direction.shape}, expected ({dim},)"
            )
        for j in range(i):
            dot = float(np.dot(a.direction, spikes[j].direction))
            if abs(dot) > SPIKE_ORTHO_TOL:
                raise ContractError(
                    f"spike directions {j} and {i} are not orthogonal "
                    f"within 1e-8 (<u_i,u_j> = {dot!r})"
                )


def sample_spiked_population(
    n: int,
    dim: int,
    sigma_sq: float,
    spikes: list[SpikeSpec],
    seed: int,
) -> np.ndarray:
    """Draw n i.i.d. rows from N(0, sigma^2 I + sum theta_i u_i u_i^T).

    Deterministic for a fixed seed: one Gaussian block of shape
    (n, dim + len(spikes)) is drawn up front, so samples with the same seed
    but different spike strengths share their underlying noise.
    """
    if n < 1 or dim < 1:
        raise DomainError(f"n and dim must be positive, got {n}, {dim}")
    if not (sigma_sq > 0.0):
        raise DomainError(f"sigma_sq must be positive, got {sigma_sq}")
    _check_orthonormal_spikes(spikes, dim)
    rng = make_rng(seed)
    g = normal(rng, (n, dim + len(spikes)))
    x = math.sqrt(sigma_sq) * g[:, :dim]
    for i, spike in enumerate(spikes):
        x = x + math.sqrt(spike.strength) * np.outer(g[:, dim + i], spike.direction)
    return x
