"""Log densities (up to constants) of the two posterior forms, with exact
gradients, and flat-vector adapters for the gradient-based samplers.

The output-loss posterior lives on weights and biases only: squared loss
for regression, softmax cross-entropy for classification, both scaled by
1/(2 delta). The noisy-layer posterior adds every pre- and
post-activation as a variable, each contributing one Gaussian term; a
probit output adds a hard argmax constraint instead of a loss.
"""
from __future__ import annotations

import numpy as np

from .conv import ConvIndexMap, PoolMap
from .network import (
    Activation,
    ChainState,
    Dataset,
    NetworkSpec,
    NoiseSchedule,
    NonDifferentiableActivation,
    PriorSpec,
    OUTPUT_PROBIT,
    OUTPUT_REGRESSION,
)

__all__ = [
    "classical_log_posterior",
    "intermediate_log_posterior",
    "FlatPacker",
    "make_classical_target",
    "make_intermediate_target",
]


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _prior_terms(W, b, spec, prior):
    logp = 0.0
    grad_w, grad_b = {}, {}
    for l in range(1, spec.depth + 1):
        lam = prior.lambda_w[l]
        logp -= 0.5 * lam * float(np.sum(W[l] * W[l]))
        grad_w[l] = -lam * W[l]
        if spec.has_bias(l) and b.get(l) is not None:
            lam_b = prior.lambda_b[l]
            logp -= 0.5 * lam_b * float(np.sum(b[l] * b[l]))
            grad_b[l] = -lam_b * b[l]
    return logp, grad_w, grad_b


def _forward_caches(spec, W, b, inputs):
    """Noiseless forward pass keeping every stage needed for backprop."""
    caches = {"inputs": inputs}
    if spec.is_dense:
        x = inputs
        xs, zs = [x], []
        for l in range(1, spec.depth + 1):
            z = x @ W[l].T
            if b.get(l) is not None:
                z = z + b[l]
            zs.append(z)
            if l < spec.depth:
                x = spec.activation.apply(z)
                xs.append(x)
        caches["xs"], caches["zs"] = xs, zs
        return zs[-1], caches
    if spec.depth != 2:
        raise ValueError("conv stacks support exactly one conv and one dense layer")
    conv_layer = spec.layers[0]
    imap = ConvIndexMap.for_layer(conv_layer)
    caches["imap"] = imap
    z1 = imap.conv_mean(W[1], inputs)
    if b.get(1) is not None:
        z1 = z1 + b[1][None, :, None, None]
    caches["z1"] = z1
    cur = z1
    if spec.pool is not None:
        pmap = PoolMap.for_layer(spec.pool)
        caches["pmap"] = pmap
        cur = pmap.pool_mean(cur)
        caches["pooled"] = cur
    hidden = spec.activation.apply(cur)
    caches["pre_act"] = cur
    flat = hidden.reshape(inputs.shape[0], -1)
    caches["hidden_flat"] = flat
    out = flat @ W[2].T
    if b.get(2) is not None:
        out = out + b[2]
    return out, caches


def _backward_from_output(spec, W, b, caches, d_out):
    """Propagate a gradient at the network output back to all parameters."""
    grad_w, grad_b = {}, {}
    if spec.is_dense:
        xs, zs = caches["xs"], caches["zs"]
        delta = d_out
        for l in range(spec.depth, 0, -1):
            grad_w[l] = delta.T @ xs[l - 1]
            if b.get(l) is not None:
                grad_b[l] = delta.sum(axis=0)
            if l > 1:
                delta = (delta @ W[l]) * spec.activation.derivative(zs[l - 2])
        return grad_w, grad_b
    imap = caches["imap"]
    n = caches["inputs"].shape[0]
    grad_w[2] = d_out.T @ caches["hidden_flat"]
    if b.get(2) is not None:
        grad_b[2] = d_out.sum(axis=0)
    d_hidden = (d_out @ W[2]).reshape(n, *caches["pre_act"].shape[1:])
    d_pre = d_hidden * spec.activation.derivative(caches["pre_act"])
    if spec.pool is not None:
        pmap = caches["pmap"]
        d_z1 = np.zeros_like(caches["z1"])
        spread = np.repeat(np.repeat(d_pre, pmap.window_height, axis=-2), pmap.window_width, axis=-1)
        d_z1[..., : pmap.retained_height, : pmap.retained_width] = spread / pmap.k
    else:
        d_z1 = d_pre
    c_out = W[1].shape[0]
    patches = imap.im2col(caches["inputs"])  # (n, P, C_in*K)
    d_z1_flat = d_z1.reshape(n, c_out, imap.out_positions)
    grad_flat = np.einsum("nca,nak->ck", d_z1_flat, patches)
    grad_w[1] = grad_flat.reshape(W[1].shape)
    if b.get(1) is not None:
        grad_b[1] = d_z1_flat.sum(axis=(0, 2))
    return grad_w, grad_b


def classical_log_posterior(
    W: dict[int, np.ndarray],
    b: dict[int, np.ndarray | None],
    dataset: Dataset,
    spec: NetworkSpec,
    delta: float,
    prior: PriorSpec,
    want_grad: bool = True,
):
    """Output-loss posterior log density and its gradient over (W, b).

    Regression pairs the squared loss with temperature delta; probit
    specs are scored with softmax cross-entropy here (hard argmax stays a
    prediction-time device). ReLU uses the zero subgradient at the kink.
    """
    inputs = np.asarray(dataset.inputs, dtype=float)
    out, caches = _forward_caches(spec, W, b, inputs)
    logp, grad_w, grad_b = _prior_terms(W, b, spec, prior)

    n = inputs.shape[0]
    if n > 0:
        if spec.output == OUTPUT_REGRESSION:
            y = np.asarray(dataset.labels, dtype=float).reshape(out.shape)
            resid = out - y
            logp += -float(np.sum(resid * resid)) / (2.0 * delta)
            d_out = -resid / delta
        else:
            y = np.asarray(dataset.labels, dtype=int)
            q = _softmax(out)
            picked = np.clip(q[np.arange(n), y], 1e-300, None)
            logp += -float(np.sum(-np.log(picked))) / (2.0 * delta)
            onehot = np.zeros_like(q)
            onehot[np.arange(n), y] = 1.0
            d_out = -(q - onehot) / (2.0 * delta)
    if not want_grad:
        return logp, None
    if n > 0:
        gw, gb = _backward_from_output(spec, W, b, caches, d_out)
        for l in gw:
            grad_w[l] = grad_w[l] + gw[l]
        for l in gb:
            grad_b[l] = grad_b[l] + gb[l]
    return logp, {"W": grad_w, "b": grad_b}


def intermediate_log_posterior(
    state: ChainState,
    spec: NetworkSpec,
    noise: NoiseSchedule,
    prior: PriorSpec,
    want_grad: bool = True,
):
    """Noisy-layer posterior log density and gradient over all unclamped
    variables.

    Every layer contributes one Gaussian quadratic; a probit output adds
    -inf when the argmax constraint is broken, and within the feasible
    region its score block is the plain residual term. The gradient is
    exact almost everywhere for relu/abs/linear; sign has none.
    """
    if want_grad and spec.activation is Activation.SIGN:
        raise NonDifferentiableActivation("sign activation has no usable gradient")
    logp, grad_w, grad_b = _prior_terms(state.W, state.b, spec, prior)
    grads = {"W": grad_w, "b": grad_b, "X": {}, "Z": {}, "P": {}}

    if spec.is_dense:
        logp = _dense_intermediate(state, spec, noise, logp, grads, want_grad)
    else:
        logp = _conv_intermediate(state, spec, noise, logp, grads, want_grad)

    if spec.output == OUTPUT_PROBIT:
        top = state.Z[spec.depth + 1]
        if np.any(np.argmax(top, axis=1) != state.labels):
            logp = -np.inf
    if not want_grad:
        return logp, None
    return logp, grads


def _dense_intermediate(state, spec, noise, logp, grads, want_grad):
    big_l = spec.depth
    act = spec.activation
    for l in range(1, big_l + 1):
        x = state.X[l]
        resid = state.Z[l + 1] - x @ state.W[l].T
        if state.b.get(l) is not None:
            resid = resid - state.b[l]
        dz = noise.delta_z[l + 1]
        logp -= float(np.sum(resid * resid)) / (2.0 * dz)
        if want_grad:
            grads["W"][l] = grads["W"][l] + resid.T @ x / dz
            if state.b.get(l) is not None:
                grads["b"][l] = grads["b"][l] + resid.sum(axis=0) / dz
            if l >= 2:
                grads["X"][l] = grads["X"].get(l, 0.0) + resid @ state.W[l] / dz
            if l + 1 <= big_l or spec.output == OUTPUT_PROBIT:
                grads["Z"][l + 1] = grads["Z"].get(l + 1, 0.0) - resid / dz
    for l in range(2, big_l + 1):
        dx = noise.delta_x[l]
        mismatch = state.X[l] - act.apply(state.Z[l])
        logp -= float(np.sum(mismatch * mismatch)) / (2.0 * dx)
        if want_grad:
            grads["X"][l] = grads["X"].get(l, 0.0) - mismatch / dx
            grads["Z"][l] = grads["Z"].get(l, 0.0) + mismatch * act.derivative(state.Z[l]) / dx
    return logp


def _conv_intermediate(state, spec, noise, logp, grads, want_grad):
    conv_layer = spec.layers[0]
    imap = ConvIndexMap.for_layer(conv_layer)
    act = spec.activation
    n = state.n
    c_out = conv_layer.channels_out

    conv_mean = imap.conv_mean(state.W[1], state.X[1])
    if state.b.get(1) is not None:
        conv_mean = conv_mean + state.b[1][None, :, None, None]
    r1 = state.Z[2] - conv_mean
    dz2 = noise.delta_z[2]
    logp -= float(np.sum(r1 * r1)) / (2.0 * dz2)
    if want_grad:
        r1_flat = r1.reshape(n, c_out, imap.out_positions)
        patches = imap.im2col(state.X[1])
        grads["W"][1] = grads["W"][1] + np.einsum(
            "nca,nak->ck", r1_flat, patches
        ).reshape(state.W[1].shape) / dz2
        if state.b.get(1) is not None:
            grads["b"][1] = grads["b"][1] + r1_flat.sum(axis=(0, 2)) / dz2
        grads["Z"][2] = grads["Z"].get(2, 0.0) - r1 / dz2

    pre_act = state.Z[2]
    if spec.pool is not None:
        pmap = PoolMap.for_layer(spec.pool)
        dpool = noise.delta_pool[2]
        rp = state.P[2] - pmap.pool_mean(state.Z[2])
        logp -= float(np.sum(rp * rp)) / (2.0 * dpool)
        pre_act = state.P[2]
        if want_grad:
            grads["P"][2] = grads["P"].get(2, 0.0) - rp / dpool
            back = np.zeros_like(state.Z[2])
            spread = np.repeat(np.repeat(rp, pmap.window_height, axis=-2), pmap.window_width, axis=-1)
            back[..., : pmap.retained_height, : pmap.retained_width] = spread / pmap.k
            grads["Z"][2] = grads["Z"][2] + back / dpool

    dx2 = noise.delta_x[2]
    mismatch = state.X[2] - act.apply(pre_act)
    logp -= float(np.sum(mismatch * mismatch)) / (2.0 * dx2)
    if want_grad:
        grads["X"][2] = grads["X"].get(2, 0.0) - mismatch / dx2
        pulled = mismatch * act.derivative(pre_act) / dx2
        if spec.pool is not None:
            grads["P"][2] = grads["P"][2] + pulled
        else:
            grads["Z"][2] = grads["Z"][2] + pulled

    x2_flat = state.X[2].reshape(n, -1)
    r2 = state.Z[3] - x2_flat @ state.W[2].T
    if state.b.get(2) is not None:
        r2 = r2 - state.b[2]
    dz3 = noise.delta_z[3]
    logp -= float(np.sum(r2 * r2)) / (2.0 * dz3)
    if want_grad:
        grads["W"][2] = grads["W"][2] + r2.T @ x2_flat / dz3
        if state.b.get(2) is not None:
            grads["b"][2] = grads["b"][2] + r2.sum(axis=0) / dz3
        grads["X"][2] = grads["X"][2] + (r2 @ state.W[2]).reshape(state.X[2].shape) / dz3
        if spec.output == OUTPUT_PROBIT:
            grads["Z"][3] = grads["Z"].get(3, 0.0) - r2 / dz3
    return logp


class FlatPacker:
    """Bijection between a set of named variable blocks and one flat vector."""

    def __init__(self, blocks: list[tuple[str, int, tuple[int, ...]]]):
        self.blocks = blocks
        self.slices = {}
        off = 0
        for kind, l, shape in blocks:
            size = int(np.prod(shape))
            self.slices[(kind, l)] = (slice(off, off + size), shape)
            off += size
        self.size = off

    @classmethod
    def for_classical(cls, spec: NetworkSpec) -> "FlatPacker":
        blocks = []
        for l in range(1, spec.depth + 1):
            blocks.append(("W", l, spec.weight_shape(l)))
            if spec.has_bias(l):
                blocks.append(("b", l, (spec.bias_width(l),)))
        return cls(blocks)

    @classmethod
    def for_intermediate(cls, spec: NetworkSpec, n: int) -> "FlatPacker":
        packer = cls.for_classical(spec)
        blocks = list(packer.blocks)
        if spec.is_dense:
            for l in range(2, spec.depth + 1):
                blocks.append(("X", l, (n, spec.hidden_width(l))))
                blocks.append(("Z", l, (n, spec.hidden_width(l))))
        else:
            conv_layer = spec.layers[0]
            z2_shape = (n, conv_layer.channels_out, conv_layer.out_height, conv_layer.out_width)
            blocks.append(("Z", 2, z2_shape))
            if spec.pool is not None:
                p = spec.pool
                blocks.append(("P", 2, (n, p.channels, p.out_height, p.out_width)))
                blocks.append(("X", 2, (n, p.channels, p.out_height, p.out_width)))
            else:
                blocks.append(("X", 2, z2_shape))
        if spec.output == OUTPUT_PROBIT:
            blocks.append(("Z", spec.depth + 1, (n, spec.out_width)))
        return cls(blocks)

    def pack(self, parts: dict[str, dict[int, np.ndarray]]) -> np.ndarray:
        vec = np.empty(self.size)
        for (kind, l), (sl, shape) in self.slices.items():
            vec[sl] = np.asarray(parts[kind][l], dtype=float).ravel()
        return vec

    def unpack(self, vec: np.ndarray) -> dict[str, dict[int, np.ndarray]]:
        out: dict[str, dict[int, np.ndarray]] = {}
        for (kind, l), (sl, shape) in self.slices.items():
            out.setdefault(kind, {})[l] = vec[sl].reshape(shape)
        return out


def make_classical_target(dataset: Dataset, spec: NetworkSpec, delta: float, prior: PriorSpec):
    """(flat position) -> (log density, flat gradient) for the loss posterior."""
    packer = FlatPacker.for_classical(spec)

    def target(vec: np.ndarray):
        parts = packer.unpack(vec)
        W = parts["W"]
        b = parts.get("b", {})
        logp, grads = classical_log_posterior(W, b, dataset, spec, delta, prior)
        return logp, packer.pack({"W": grads["W"], "b": grads["b"]})

    return target, packer


def make_intermediate_target(dataset: Dataset, spec: NetworkSpec, noise: NoiseSchedule, prior: PriorSpec):
    """(flat position) -> (log density, flat gradient) over the noisy chain.

    Inputs and the output pre-activations stay clamped for regression;
    for probit the output scores are part of the position and the hard
    constraint shows up as a -inf density outside the feasible cone.
    """
    packer = FlatPacker.for_intermediate(spec, np.asarray(dataset.inputs).shape[0])
    inputs = np.asarray(dataset.inputs, dtype=float)
    big_l = spec.depth
    if spec.output == OUTPUT_REGRESSION:
        top = np.asarray(dataset.labels, dtype=float)
        if top.ndim == 1:
            top = top.reshape(-1, 1)
        labels = None
    else:
        top = None
        labels = np.asarray(dataset.labels, dtype=int)

    def target(vec: np.ndarray):
        parts = packer.unpack(vec)
        state = ChainState(
            W=parts["W"],
            b=parts.get("b", {}),
            X={1: inputs, **parts.get("X", {})},
            Z=dict(parts.get("Z", {})),
            P=dict(parts.get("P", {})),
            labels=labels,
        )
        if spec.output == OUTPUT_REGRESSION:
            state.Z[big_l + 1] = top
        logp, grads = intermediate_log_posterior(state, spec, noise, prior)
        flat_grads = {}
        for kind in ("W", "b", "X", "Z", "P"):
            flat_grads[kind] = grads.get(kind, {})
        # clamped blocks are not in the packer, so stray keys are dropped
        gvec = np.zeros(packer.size)
        for (kind, l), (sl, shape) in packer.slices.items():
            g = flat_grads.get(kind, {}).get(l)
            if g is not None:
                gvec[sl] = np.asarray(g).ravel()
        return logp, gvec

    return target, packer
