"""Stateless numerical primitives shared by all samplers.

Multivariate Gaussian sampling through Cholesky factors with a jitter
ladder, one-sided truncated-normal generation that stays cheap arbitrarily
deep in the tail, overflow-free two-branch mass ratios, and reproducible
counter-based RNG streams.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

__all__ = [
    "NotPositiveDefinite",
    "RngStream",
    "GaussianParams",
    "TruncationSide",
    "cholesky_factor",
    "sample_mvn",
    "sample_truncated_normal",
    "std_lower_truncated",
    "trunc_norm_lower",
    "trunc_norm_upper",
    "stable_branch_probability",
    "branch_prob_negative",
    "log_gauss_mass_lower",
    "log_gauss_mass_upper",
]

# Standardized bound beyond which inverse-CDF inversion is abandoned for
# exponential-proposal rejection.
_TAIL_SPLIT = 4.0

_JITTER_ATTEMPTS = 6
_JITTER_START = 1e-12


class NotPositiveDefinite(Exception):
    """Covariance could not be factored even after maximum jitter."""


class TruncationSide:
    """Which half-line of the real axis a truncated normal lives on."""

    POSITIVE = "positive"
    NEGATIVE = "negative"


class RngStream:
    """A reproducible, addressable random stream.

    Built on the counter-based Philox generator so that distinct
    ``stream_id`` tuples give statistically independent streams, and two
    streams constructed from the same ``(seed, stream_id)`` produce
    bitwise-identical draws. Child streams are pure functions of the
    parent's identity plus the extra ids, so per-layer streams stay
    reproducible under any parallel scheduling.
    """

    __slots__ = ("seed", "stream_id", "_generator", "_spawned")

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = ()):
        if isinstance(stream_id, int):
            stream_id = (stream_id,)
        self.seed = int(seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        # zig-zag fold so negative ids stay valid spawn keys
        key = tuple(2 * s if s >= 0 else -2 * s - 1 for s in self.stream_id)
        seq = np.random.SeedSequence(self.seed, spawn_key=key)
        self._generator = np.random.Generator(np.random.Philox(seq))
        self._spawned = 0

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def child(self, *ids: int) -> "RngStream":
        """Derive an independent stream addressed by extra id components."""
        return RngStream(self.seed, self.stream_id + ids)

    def spawn(self) -> "RngStream":
        """Derive the next child in a deterministic sequence of spawns."""
        out = self.child(self._spawned)
        self._spawned += 1
        return out

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


@dataclass(frozen=True)
class GaussianParams:
    """Mean vector and symmetric covariance of a multivariate Gaussian."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.covariance, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be a square matrix")
        if mean.shape != (cov.shape[0],):
            raise ValueError("mean and covariance dimensions disagree")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def cholesky_factor(covariance: np.ndarray, return_jitter: bool = False):
    """Lower-triangular L with L@L.T == covariance, jittering if needed.

    The jitter ladder starts at 1e-12 * trace/dim and grows tenfold for at
    most six attempts; near-singular matrices (tiny noise variances make
    the conditional covariances almost rank-deficient) then factor with a
    recomposition error bounded by the jitter used.
    """
    cov = np.asarray(covariance, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] < 1:
        raise ValueError("expected a square matrix of dimension >= 1")
    dim = cov.shape[0]
    try:
        factor = np.linalg.cholesky(cov)
        return (factor, 0.0) if return_jitter else factor
    except np.linalg.LinAlgError:
        pass
    scale = max(np.trace(cov) / dim, np.finfo(float).tiny)
    jitter = _JITTER_START * scale
    eye = np.eye(dim)
    for _ in range(_JITTER_ATTEMPTS):
        try:
            factor = np.linalg.cholesky(cov + jitter * eye)
            return (factor, jitter) if return_jitter else factor
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefinite(
        f"Cholesky failed after {_JITTER_ATTEMPTS} jitter attempts (last jitter {jitter:.3e})"
    )


def sample_mvn(params: GaussianParams, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Exact draw(s) from N(mean, covariance) via mean + L z."""
    factor = cholesky_factor(params.covariance)
    gen = rng.generator
    if size is None:
        z = gen.standard_normal(params.dim)
        return params.mean + factor @ z
    z = gen.standard_normal((size, params.dim))
    return params.mean + z @ factor.T


def std_lower_truncated(a: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Standard normal conditioned on being >= a, elementwise over ``a``.

    Inverse-CDF in the body, exponential-proposal rejection beyond
    ``_TAIL_SPLIT`` standard deviations; expected work stays bounded no
    matter how deep the truncation.
    """
    a = np.asarray(a, dtype=float)
    out = np.empty(a.shape, dtype=float)

    body = a <= _TAIL_SPLIT
    if body.any():
        ab = a[body]
        u = gen.uniform(size=ab.shape)
        left = ab <= 0.0
        res = np.empty(ab.shape, dtype=float)
        if left.any():
            al = ab[left]
            # CDF-side inversion is well conditioned when the bound is left of 0
            res[left] = ndtri(ndtr(al) + u[left] * ndtr(-al))
        right = ~left
        if right.any():
            ar = ab[right]
            # survival-side inversion keeps the small tail mass representable
            res[right] = -ndtri(u[right] * ndtr(-ar))
        out[body] = res

    tail = ~body
    if tail.any():
        at = a[tail]
        lam = 0.5 * (at + np.sqrt(at * at + 4.0))
        res = np.empty(at.shape, dtype=float)
        pending = np.ones(at.shape, dtype=bool)
        while pending.any():
            k = int(pending.sum())
            u1 = gen.uniform(size=k)
            u2 = gen.uniform(size=k)
            prop = at[pending] - np.log(u1) / lam[pending]
            accept = u2 <= np.exp(-0.5 * (prop - lam[pending]) ** 2)
            idx = np.flatnonzero(pending)[accept]
            res[idx] = prop[accept]
            pending[idx] = False
        out[tail] = res
    return out


def trunc_norm_lower(mean, var, lower, rng: RngStream) -> np.ndarray:
    """Draws from N(mean, var) conditioned on being >= lower (elementwise)."""
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.asarray(var, dtype=float))
    lower = np.asarray(lower, dtype=float)
    mean, sd, lower = np.broadcast_arrays(mean, sd, lower)
    a = (lower - mean) / sd
    return mean + sd * std_lower_truncated(a, rng.generator)


def trunc_norm_upper(mean, var, upper, rng: RngStream) -> np.ndarray:
    """Draws from N(mean, var) conditioned on being <= upper (elementwise)."""
    mean = np.asarray(mean, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return -trunc_norm_lower(-mean, var, -upper, rng)


def sample_truncated_normal(mu: float, var: float, side: str, rng: RngStream) -> float:
    """One draw from N(mu, var) restricted to the chosen half-line."""
    if var <= 0.0:
        raise ValueError("variance must be positive")
    if side == TruncationSide.POSITIVE:
        return float(trunc_norm_lower(mu, var, 0.0, rng))
    if side == TruncationSide.NEGATIVE:
        return float(-trunc_norm_lower(-mu, var, 0.0, rng))
    raise ValueError(f"unknown truncation side: {side!r}")


def log_gauss_mass_lower(mean, var, bound):
    """log integral over (-inf, bound] of the N(mean, var) density."""
    sd = np.sqrt(np.asarray(var, dtype=float))
    return log_ndtr((np.asarray(bound, float) - np.asarray(mean, float)) / sd)


def log_gauss_mass_upper(mean, var, bound):
    """log integral over [bound, inf) of the N(mean, var) density."""
    sd = np.sqrt(np.asarray(var, dtype=float))
    return log_ndtr((np.asarray(mean, float) - np.asarray(bound, float)) / sd)


def stable_branch_probability(log_mass_pos: float, log_mass_neg: float) -> float:
    """Probability of the negative branch given two log masses.

    Returns 1/(1 + exp(log_mass_pos - log_mass_neg)) without overflow.
    The larger branch is always computed directly and the smaller as its
    exact floating-point complement, so p(a, b) + p(b, a) == 1.0 holds
    bitwise for all finite inputs.
    """
    d = log_mass_neg - log_mass_pos
    if math.isnan(d):
        # one mass is -inf and the other also -inf: split evenly
        if log_mass_pos == log_mass_neg:
            return 0.5
        raise ValueError("log masses must be finite or one of them -inf")
    if d >= 0.0:
        return 1.0 / (1.0 + math.exp(-d))
    return 1.0 - 1.0 / (1.0 + math.exp(d))


def branch_prob_negative(log_mass_pos: np.ndarray, log_mass_neg: np.ndarray) -> np.ndarray:
    """Vectorized negative-branch probability, same algebra as the scalar op."""
    d = np.asarray(log_mass_neg, float) - np.asarray(log_mass_pos, float)
    out = np.empty(d.shape, dtype=float)
    hi = d >= 0.0
    out[hi] = 1.0 / (1.0 + np.exp(-d[hi]))
    lo = ~hi
    out[lo] = 1.0 - 1.0 / (1.0 + np.exp(d[lo]))
    # equal -inf masses carry no preference
    both_ninf = np.isnan(d) & np.isneginf(log_mass_pos) & np.isneginf(log_mass_neg)
    out[both_ninf] = 0.5
    return out
