"""Gradient-based baseline samplers: Hamiltonian Monte Carlo and the
Metropolis-adjusted Langevin algorithm.

Both operate on a flat position vector through a single callable that
returns the log density and its gradient. No mass-matrix or step-size
adaptation: hyperparameters are fixed inputs, acceptance is computed in
log space, and a non-finite proposal density counts as a rejection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import RngStream

__all__ = [
    "HmcSettings",
    "MalaSettings",
    "ChainRun",
    "hmc_step",
    "mala_step",
    "run_chain",
]


@dataclass(frozen=True)
class HmcSettings:
    step_size: float
    leapfrog_steps: int

    def __post_init__(self):
        if not self.step_size > 0.0:
            raise ValueError("step_size must be positive")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")


@dataclass(frozen=True)
class MalaSettings:
    step_size: float

    def __post_init__(self):
        if not self.step_size > 0.0:
            raise ValueError("step_size must be positive")


def hmc_step(position: np.ndarray, target, settings: HmcSettings, rng: RngStream):
    """One HMC transition: (new position, accepted, energy error).

    Fresh standard-normal momentum, ``leapfrog_steps`` half-kick /
    drift / half-kick steps along the log-density gradient, then a
    Metropolis test on the total-energy change log(z) < H - H_prop with
    H = -log pi + |p|^2 / 2 evaluated before and after.
    """
    gen = rng.generator
    eta = settings.step_size
    logp0, grad0 = target(position)
    p = gen.standard_normal(position.shape)
    energy0 = -logp0 + 0.5 * float(p @ p)

    x = position.copy()
    grad = grad0
    for _ in range(settings.leapfrog_steps):
        p = p + 0.5 * eta * grad
        x = x + eta * p
        logp, grad = target(x)
        p = p + 0.5 * eta * grad

    if not np.isfinite(logp):
        return position, False, np.inf
    energy1 = -logp + 0.5 * float(p @ p)
    err = energy1 - energy0
    if np.log(gen.uniform()) < energy0 - energy1:
        return x, True, err
    return position, False, err


def mala_step(position: np.ndarray, target, settings: MalaSettings, rng: RngStream):
    """One MALA transition: (new position, accepted).

    Proposal x' = x + eta grad log pi(x) + sqrt(2 eta) xi with the
    asymmetric-proposal Metropolis correction, all ratios in log space.
    """
    gen = rng.generator
    eta = settings.step_size
    logp0, grad0 = target(position)
    xi = gen.standard_normal(position.shape)
    prop = position + eta * grad0 + np.sqrt(2.0 * eta) * xi
    logp1, grad1 = target(prop)
    if not np.isfinite(logp1):
        return position, False
    fwd = prop - position - eta * grad0
    back = position - prop - eta * grad1
    log_q_fwd = -float(fwd @ fwd) / (4.0 * eta)
    log_q_back = -float(back @ back) / (4.0 * eta)
    log_alpha = logp1 - logp0 + log_q_back - log_q_fwd
    if np.log(gen.uniform()) < log_alpha:
        return prop, True
    return position, False


@dataclass
class ChainRun:
    """Recorded trajectory of one MCMC chain."""

    times: np.ndarray
    values: np.ndarray
    accepted: int
    steps: int
    final_position: np.ndarray

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.steps if self.steps else float("nan")


def run_chain(
    kind: str,
    position: np.ndarray,
    target,
    settings,
    n_steps: int,
    observer=None,
    spacing: int = 1,
    rng: RngStream | None = None,
) -> ChainRun:
    """Iterate a sampler, recording the observer every ``spacing`` steps.

    The initial state is always recorded; afterwards records land on step
    multiples of ``spacing``. The accepted/total bookkeeping is exact.
    """
    if n_steps < 1:
        raise ValueError("need at least one step")
    if rng is None:
        raise ValueError("an RngStream is required")
    if kind == "hmc":
        step = lambda x: hmc_step(x, target, settings, rng)[:2]
    elif kind == "mala":
        step = lambda x: mala_step(x, target, settings, rng)
    else:
        raise ValueError(f"unknown sampler kind {kind!r}")
    if observer is None:
        observer = lambda x: np.asarray([0.0])

    x = np.asarray(position, dtype=float).copy()
    times = [0]
    values = [np.atleast_1d(np.asarray(observer(x), dtype=float))]
    accepted = 0
    for t in range(1, n_steps + 1):
        x, ok = step(x)
        accepted += bool(ok)
        if t % spacing == 0:
            times.append(t)
            values.append(np.atleast_1d(np.asarray(observer(x), dtype=float)))
    return ChainRun(
        times=np.asarray(times),
        values=np.asarray(values),
        accepted=accepted,
        steps=n_steps,
        final_position=x,
    )
