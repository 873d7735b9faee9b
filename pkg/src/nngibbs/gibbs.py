"""Conditional-distribution updates for dense networks and the sweep
schedulers (sequential and phase-parallel).

Every update redraws one variable block from its exact conditional given
the rest of the chain: rows of X and W are multivariate Gaussians sharing
one covariance factorization per layer per sweep, pre-activations Z are
scalar two-branch mixtures of one-sided truncated normals, biases are
scalar Gaussians, and the probit output layer is a sequential pass of
truncated normals that preserves the argmax constraint.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from .kernels import RngStream, branch_prob_negative, log_gauss_mass_lower, log_gauss_mass_upper
from .network import Activation, ChainState, NetworkSpec, NoiseSchedule, PriorSpec, OUTPUT_PROBIT

__all__ = [
    "SweepSchedule",
    "ZBranchMasses",
    "UnsupportedActivation",
    "z_branch_masses",
    "sample_z_scalar",
    "update_X_layer",
    "update_W_layer",
    "update_Z_layer",
    "update_bias_layer",
    "update_probit_output",
    "gibbs_sweep",
]


class UnsupportedActivation(Exception):
    """The two-branch Z machinery does not cover this activation."""


@dataclass(frozen=True)
class SweepSchedule:
    """How one Gibbs sweep visits the variable blocks.

    ``sequential`` follows the single-chain update order (first layer's
    weights, then per layer X, W, Z, then the output Z for probit).
    ``phase_parallel`` runs three phases -- all X, all W and biases, all
    Z -- with layers independent inside a phase; per-(phase, layer) RNG
    substreams make the result independent of worker interleaving.
    """

    mode: str = "sequential"
    worker_count: int = 1

    def __post_init__(self):
        if self.mode not in ("sequential", "phase_parallel"):
            raise ValueError(f"unknown sweep mode {self.mode!r}")
        if self.worker_count < 1:
            raise ValueError("worker_count must be positive")


@dataclass
class ZBranchMasses:
    """Log masses and Gaussian parameters of the two half-line branches.

    Masses integrate the unnormalized conditional density itself (both
    Gaussian factors evaluated exactly), so the normalized branch split
    is free of any shared constant.
    """

    log_mass_pos: np.ndarray
    log_mass_neg: np.ndarray
    mean_pos: np.ndarray
    var_pos: np.ndarray | float
    mean_neg: np.ndarray
    var_neg: np.ndarray | float



def z_branch_masses(activation: Activation, wx, x_next, dz: float, dx: float) -> ZBranchMasses:
    """Two-branch decomposition of the scalar pre-activation conditional.

    The conditional density is exp[-(z - wx)^2 / 2 dz] *
    exp[-(act(z) - x_next)^2 / 2 dx]; restricted to each half-line it is a
    (truncated) Gaussian. All erfc-type mass factors are evaluated in
    scaled log form, so arbitrarily lopsided branches stay finite.
    """
    if dz <= 0.0 or dx <= 0.0:
        raise ValueError("noise variances must be positive")
    activation = Activation(activation)
    wx = np.asarray(wx, dtype=float)
    x_next = np.asarray(x_next, dtype=float)

    if activation is Activation.RELU:
        v = dz * dx / (dz + dx)
        mean_pos = (dx * wx + dz * x_next) / (dz + dx)
        log_pos = (
            -((wx - x_next) ** 2) / (2.0 * (dz + dx))
            + 0.5 * np.log(2.0 * np.pi * v)
            + log_gauss_mass_upper(mean_pos, v, 0.0)
        )
        # below zero the activation contributes a z-free factor only
        mean_neg = wx
        log_neg = (
            -(x_next**2) / (2.0 * dx)
            + 0.5 * np.log(2.0 * np.pi * dz)
            + log_gauss_mass_lower(wx, dz, 0.0)
        )
        return ZBranchMasses(log_pos, log_neg, mean_pos, v, np.broadcast_to(mean_neg, log_neg.shape), dz)

    if activation is Activation.SIGN:
        log_pos = (
            -((1.0 - x_next) ** 2) / (2.0 * dx)
            + 0.5 * np.log(2.0 * np.pi * dz)
            + log_gauss_mass_upper(wx, dz, 0.0)
        )
        log_neg = (
            -((1.0 + x_next) ** 2) / (2.0 * dx)
            + 0.5 * np.log(2.0 * np.pi * dz)
            + log_gauss_mass_lower(wx, dz, 0.0)
        )
        m = np.broadcast_to(wx, log_pos.shape)
        return ZBranchMasses(log_pos, log_neg, m, dz, m, dz)

    if activation is Activation.ABS:
        v = dz * dx / (dz + dx)
        mean_pos = (dx * wx + dz * x_next) / (dz + dx)
        mean_neg = (dx * wx - dz * x_next) / (dz + dx)
        log_pos = (
            -((wx - x_next) ** 2) / (2.0 * (dz + dx))
            + 0.5 * np.log(2.0 * np.pi * v)
            + log_gauss_mass_upper(mean_pos, v, 0.0)
        )
        log_neg = (
            -((wx + x_next) ** 2) / (2.0 * (dz + dx))
            + 0.5 * np.log(2.0 * np.pi * v)
            + log_gauss_mass_lower(mean_neg, v, 0.0)
        )
        return ZBranchMasses(log_pos, log_neg, mean_pos, v, mean_neg, v)

    raise UnsupportedActivation(f"no two-branch decomposition for {activation.value} activation")


def sample_z_scalar(activation: Activation, wx, x_next, dz: float, dx: float, rng: RngStream) -> np.ndarray:
    """Elementwise draw from the scalar pre-activation conditional.

    Bernoulli branch choice on the exact mass split, then a one-sided
    truncated normal from the chosen branch. Linear activation takes the
    closed-form Gaussian path (the product of the two factors).
    """
    activation = Activation(activation)
    wx = np.asarray(wx, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    gen = rng.generator
    if activation is Activation.LINEAR:
        v = dz * dx / (dz + dx)
        mean = (dx * wx + dz * x_next) / (dz + dx)
        return mean + np.sqrt(v) * gen.standard_normal(mean.shape)

    masses = z_branch_masses(activation, wx, x_next, dz, dx)
    p_neg = branch_prob_negative(masses.log_mass_pos, masses.log_mass_neg)
    take_neg = gen.uniform(size=p_neg.shape) < p_neg

    # one standardized truncated pass serves both branches: the negative
    # branch is the mirrored positive one
    mu = np.where(take_neg, masses.mean_neg, masses.mean_pos)
    sd = np.sqrt(np.where(take_neg, masses.var_neg, masses.var_pos))
    signs = np.where(take_neg, -1.0, 1.0)
    bound = -signs * mu / sd
    t = kernels.std_lower_truncated(bound, gen)
    return signs * (signs * mu + sd * t)


def draw_rows_from_precision(prec: np.ndarray, rhs_rows: np.ndarray, rng: RngStream) -> np.ndarray:
    """Rows drawn from N(A^-1 h, A^-1) for a shared precision A.

    ``rhs_rows`` holds one h per row; the Cholesky factor of A is computed
    once and reused for every row. With A = L L^T, the draw is
    L^-T (L^-1 h + z), two triangular solves total.
    """
    factor = kernels.cholesky_factor(prec)
    half = solve_triangular(factor, rhs_rows.T, lower=True)
    z = rng.generator.standard_normal(half.shape)
    return solve_triangular(factor, half + z, trans="T", lower=True).T


def dense_x_conditional(W: np.ndarray, sigma_prev: np.ndarray, z_next: np.ndarray, dz: float, dx: float):
    """Precision and per-sample right-hand sides of the hidden-row law."""
    d = W.shape[1]
    prec = W.T @ W / dz + np.eye(d) / dx
    rhs = sigma_prev / dx + z_next @ W / dz
    return prec, rhs


def dense_w_conditional(X: np.ndarray, z_next: np.ndarray, dz: float, lam: float):
    """Precision and per-output-row right-hand sides of the weight law."""
    d = X.shape[1]
    prec = X.T @ X / dz + lam * np.eye(d)
    rhs = (X.T @ z_next / dz).T  # one row per output unit
    return prec, rhs


def dense_x_draw(W: np.ndarray, sigma_prev: np.ndarray, z_next: np.ndarray, dz: float, dx: float, rng: RngStream) -> np.ndarray:
    """Joint Gaussian draw of hidden rows given both adjacent layers.

    ``sigma_prev`` is the activation of the layer's own pre-activation
    and ``z_next`` the bias-subtracted next pre-activation.
    """
    prec, rhs = dense_x_conditional(W, sigma_prev, z_next, dz, dx)
    return draw_rows_from_precision(prec, rhs, rng)


def dense_w_draw(X: np.ndarray, z_next: np.ndarray, dz: float, lam: float, rng: RngStream) -> np.ndarray:
    """Row-wise ridge-posterior draw of a dense weight matrix."""
    prec, rhs = dense_w_conditional(X, z_next, dz, lam)
    return draw_rows_from_precision(prec, rhs, rng)


def update_X_layer(l: int, state: ChainState, spec: NetworkSpec, noise: NoiseSchedule, rng: RngStream) -> np.ndarray:
    """Redraw all rows of X[l] (2 <= l <= L) from their joint Gaussian."""
    big_l = spec.depth
    if not 2 <= l <= big_l:
        raise ValueError(f"X update needs 2 <= l <= {big_l}")
    z_next = state.Z[l + 1]
    if state.b.get(l) is not None:
        z_next = z_next - state.b[l]
    sigma_prev = spec.activation.apply(state.Z[l])
    new_x = dense_x_draw(state.W[l], sigma_prev, z_next, noise.delta_z[l + 1], noise.delta_x[l], rng)
    state.X[l] = new_x
    return new_x


def update_W_layer(
    l: int,
    state: ChainState,
    spec: NetworkSpec,
    noise: NoiseSchedule,
    prior: PriorSpec,
    rng: RngStream,
) -> np.ndarray:
    """Redraw all rows of W[l] from their shared-covariance Gaussian."""
    if spec.weighted_layers[l - 1].kind != "dense":
        raise ValueError("dense W update called on a non-dense layer")
    z_next = state.Z[l + 1]
    if state.b.get(l) is not None:
        z_next = z_next - state.b[l]
    new_w = dense_w_draw(state.X[l], z_next, noise.delta_z[l + 1], prior.lambda_w[l], rng)
    state.W[l] = new_w
    return new_w


def update_Z_layer(l: int, state: ChainState, spec: NetworkSpec, noise: NoiseSchedule, rng: RngStream) -> np.ndarray:
    """Redraw every scalar of Z[l] (2 <= l <= L) from the two-branch law."""
    big_l = spec.depth
    if not 2 <= l <= big_l:
        raise ValueError(f"Z update needs 2 <= l <= {big_l}")
    wx = state.X[l - 1] @ state.W[l - 1].T
    if state.b.get(l - 1) is not None:
        wx = wx + state.b[l - 1]
    new_z = sample_z_scalar(spec.activation, wx, state.X[l], noise.delta_z[l], noise.delta_x[l], rng)
    state.Z[l] = new_z
    return new_z


def dense_bias_draw(resid: np.ndarray, dz: float, lam_b: float, rng: RngStream) -> np.ndarray:
    """Scalar Gaussian bias draw from per-unit residual columns.

    ``resid`` holds Z_next - X W^T with one column per output unit; rows
    are whatever the bias is shared across (samples, or samples x pixels
    for a conv channel bias).
    """
    n_shared = resid.shape[0]
    denom = n_shared + dz * lam_b
    mean = resid.sum(axis=0) / denom
    sd = np.sqrt(dz / denom)
    return mean + sd * rng.generator.standard_normal(mean.shape)


def update_bias_layer(l: int, state: ChainState, noise: NoiseSchedule, prior: PriorSpec, rng: RngStream) -> np.ndarray:
    """Redraw the bias vector of a dense layer from its scalar Gaussians."""
    resid = state.Z[l + 1] - state.X[l] @ state.W[l].T
    new_b = dense_bias_draw(resid, noise.delta_z[l + 1], prior.lambda_b[l], rng)
    state.b[l] = new_b
    return new_b


def update_probit_output(state: ChainState, spec: NetworkSpec, noise: NoiseSchedule, rng: RngStream) -> np.ndarray:
    """Sequential coordinate pass over the constrained output scores.

    The label coordinate is drawn truncated below at the running maximum
    of the others; every other coordinate truncated above at the label
    coordinate. The argmax constraint holds after every single draw.
    """
    if spec.output != OUTPUT_PROBIT:
        raise ValueError("probit update requires a probit output model")
    big_l = spec.depth
    Z = state.Z[big_l + 1]
    y = state.labels
    if y is None:
        raise ValueError("probit state has no labels")
    n, n_class = Z.shape
    x_top = state.X[big_l]
    if x_top.ndim > 2:
        x_top = x_top.reshape(n, -1)
    mean = x_top @ state.W[big_l].T
    if state.b.get(big_l) is not None:
        mean = mean + state.b[big_l]
    dz = noise.delta_z[big_l + 1]
    rows = np.arange(n)
    label_vals = Z[rows, y]
    for alpha in range(n_class):
        is_label = y == alpha
        if is_label.any():
            block = Z[is_label].copy()
            block[:, alpha] = -np.inf
            floor = block.max(axis=1)
            draw = kernels.trunc_norm_lower(mean[is_label, alpha], dz, floor, rng)
            Z[is_label, alpha] = draw
            label_vals[is_label] = draw
        other = ~is_label
        if other.any():
            cap = label_vals[other]
            Z[other, alpha] = kernels.trunc_norm_upper(mean[other, alpha], dz, cap, rng)
    state.Z[big_l + 1] = Z
    return Z


def _sweep_sequential(state, spec, noise, prior, rng):
    big_l = spec.depth
    update_W_layer(1, state, spec, noise, prior, rng)
    if spec.has_bias(1):
        update_bias_layer(1, state, noise, prior, rng)
    for l in range(2, big_l + 1):
        update_X_layer(l, state, spec, noise, rng)
        update_W_layer(l, state, spec, noise, prior, rng)
        if spec.has_bias(l):
            update_bias_layer(l, state, noise, prior, rng)
        update_Z_layer(l, state, spec, noise, rng)
    if spec.output == OUTPUT_PROBIT:
        update_probit_output(state, spec, noise, rng)


def _sweep_phase_parallel(state, spec, noise, prior, rng, worker_count):
    big_l = spec.depth
    sweep_rng = rng.spawn()

    def x_task(l):
        update_X_layer(l, state, spec, noise, sweep_rng.child(0, l))

    def w_task(l):
        r = sweep_rng.child(1, l)
        update_W_layer(l, state, spec, noise, prior, r)
        if spec.has_bias(l):
            update_bias_layer(l, state, noise, prior, r)

    def z_task(l):
        r = sweep_rng.child(2, l)
        if l == big_l + 1:
            update_probit_output(state, spec, noise, r)
        else:
            update_Z_layer(l, state, spec, noise, r)

    z_layers = list(range(2, big_l + 1))
    if spec.output == OUTPUT_PROBIT:
        z_layers.append(big_l + 1)
    phases = [
        (x_task, list(range(2, big_l + 1))),
        (w_task, list(range(1, big_l + 1))),
        (z_task, z_layers),
    ]
    if worker_count > 1:
        with ThreadPoolExecutor(max_workers=worker_count) as pool:
            for task, layers in phases:
                # next phase starts only after the barrier of list() joins
                list(pool.map(task, layers))
    else:
        for task, layers in phases:
            for l in layers:
                task(l)


def gibbs_sweep(
    state: ChainState,
    spec: NetworkSpec,
    noise: NoiseSchedule,
    prior: PriorSpec,
    schedule: SweepSchedule,
    rng: RngStream,
) -> ChainState:
    """Advance the chain by one full sweep; every unclamped block once."""
    if not spec.is_dense:
        from . import conv

        if schedule.mode != "sequential":
            raise ValueError("phase-parallel scheduling covers dense stacks only")
        conv.gibbs_sweep_conv(state, spec, noise, prior, rng)
        return state
    if schedule.mode == "sequential":
        _sweep_sequential(state, spec, noise, prior, rng)
    else:
        _sweep_phase_parallel(state, spec, noise, prior, rng, schedule.worker_count)
    return state
