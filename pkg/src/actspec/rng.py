"""Seeded randomness used everywhere in the toolkit.

All stochastic routines draw from a PCG64 bit generator (O'Neill's permuted
congruential generator, the 64-bit reference variant shipped with NumPy) and
convert uniforms to Gaussians with the Box-Muller transform.  Both choices are
deliberate: PCG64 has a published reference algorithm, and Box-Muller is a
closed-form map from the uniform stream, so every seeded draw in this package
is reproducible bit-for-bit on any platform with IEEE-754 doubles.  NumPy's
own ``standard_normal`` (ziggurat-based) is intentionally not used.

Seed derivation for collections (trace corpora, per-class streams) goes
through ``child_seed``, which hashes ``(master_seed, *tags)`` with NumPy's
``SeedSequence`` and returns the first 64-bit word.  The rule is part of the
public contract: the same master seed and tags always name the same stream.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_rng", "child_seed", "normal", "uniform"]


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Return a PCG64-backed generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def child_seed(master_seed: int, *tags: int) -> int:
    """Derive a 64-bit child seed from a master seed and integer tags.

    Defined as the first ``uint64`` word of
    ``SeedSequence([master_seed, *tags]).generate_state(1)``.
    """
    ss = np.random.SeedSequence([int(master_seed), *[int(t) for t in tags]])
    return int(ss.generate_state(1, np.uint64)[0])


def uniform(rng: np.random.Generator, size: int | tuple[int, ...]) -> np.ndarray:
    """Uniform draws in [0, 1) straight from the PCG64 stream."""
    return rng.random(size)


def normal(rng: np.random.Generator, size: int | tuple[int, ...]) -> np.ndarray:
    """Standard normal draws via the Box-Muller transform.

    Consumes uniforms in pairs: ``z0 = sqrt(-2 ln(1-u1)) * cos(2 pi u2)`` and
    ``z1 = sqrt(-2 ln(1-u1)) * sin(2 pi u2)``.  ``1-u1`` keeps the log away
    from zero because ``rng.random`` returns values in [0, 1).  For odd
    request sizes one pair member is discarded, so the uniform stream always
    advances by ``2 * ceil(n/2)`` draws.
    """
    shape = (size,) if isinstance(size, int) else tuple(size)
    n = int(np.prod(shape)) if shape else 1
    pairs = (n + 1) // 2
    u = rng.random((2, pairs))
    radius = np.sqrt(-2.0 * np.log1p(-u[0]))
    angle = 2.0 * np.pi * u[1]
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:n].reshape(shape)
