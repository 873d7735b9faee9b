"""Experiment orchestration: validated configs, chain initialization,
multi-chain runs with trace persistence, and post-run merge verdicts.

Configs are plain JSON (nested key/value); traces are one CSV per chain
with a ``sweep,wall_s,<observable...>`` header so any plotting stack can
consume them. Chains run concurrently on independent RNG streams, and a
re-run with the same seed reproduces every trace byte-for-byte except
the wall-clock column.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import diagnostics, gibbs, posteriors, samplers
from .conv import ConvIndexMap
from .kernels import RngStream
from .network import (
    Activation,
    ChainState,
    ConvLayer,
    Dataset,
    DenseLayer,
    NetworkSpec,
    NoiseSchedule,
    PoolLayer,
    PriorSpec,
    forward_generate,
    predict,
    test_error,
    test_mse,
    OUTPUT_PROBIT,
    OUTPUT_REGRESSION,
)

__all__ = [
    "ConfigError",
    "MissingTeacher",
    "DatasetConfig",
    "SamplerConfig",
    "ExperimentConfig",
    "initialize_chain",
    "build_dataset",
    "run_experiment",
    "read_trace",
]


class ConfigError(Exception):
    """A config field is missing, malformed, or inconsistent."""


class MissingTeacher(Exception):
    """Informed initialization asked for on a dataset without a teacher."""


@dataclass(frozen=True)
class DatasetConfig:
    source: str
    n: int | str | None = None
    n_test: int = 0
    delta_gen: float | None = None
    noiseless: bool = False
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    subset: int | None = None
    test_subset: int | None = None
    inline_inputs: tuple | None = None
    inline_labels: tuple | None = None
    path: str | None = None


@dataclass(frozen=True)
class SamplerConfig:
    kind: str
    posterior: str
    step_size: float | None = None
    leapfrog_steps: int | None = None
    schedule_mode: str = "sequential"
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkSpec
    noise: NoiseSchedule
    prior: PriorSpec
    dataset: DatasetConfig
    sampler: SamplerConfig
    initializations: tuple[str, ...]
    sweeps: int
    spacing: int
    seed: int
    max_seconds: float | None = None
    merge_window: int = 50
    merge_tolerance: float = 3.0

    def validate(self):
        if self.sweeps < 1:
            raise ConfigError("sweeps: must be >= 1")
        if self.spacing < 1:
            raise ConfigError("spacing: must be >= 1")
        if self.sampler.kind not in ("gibbs", "hmc", "mala"):
            raise ConfigError(f"sampler.kind: unknown sampler {self.sampler.kind!r}")
        if self.sampler.posterior not in ("intermediate", "classical"):
            raise ConfigError(f"sampler.posterior: unknown posterior {self.sampler.posterior!r}")
        if self.sampler.kind == "gibbs" and self.sampler.posterior == "classical":
            raise ConfigError("sampler.posterior: the Gibbs sampler runs on the intermediate posterior only")
        if self.sampler.kind == "hmc" and (self.sampler.step_size is None or self.sampler.leapfrog_steps is None):
            raise ConfigError("sampler: hmc needs step_size and leapfrog_steps")
        if self.sampler.kind == "mala" and self.sampler.step_size is None:
            raise ConfigError("sampler.step_size: mala needs a step size")
        if self.sampler.kind in ("hmc", "mala") and self.network.activation is Activation.SIGN:
            raise ConfigError("network.activation: sign has no gradient for hmc/mala")
        for init in self.initializations:
            if init == "informed" and self.dataset.source != "synthetic":
                raise ConfigError("initializations: informed requires a synthetic dataset with a stored teacher")
            if not (init in ("informed", "zero", "random") or init.startswith("gaussian:")):
                raise ConfigError(f"initializations: unknown kind {init!r}")
        if not self.initializations:
            raise ConfigError("initializations: need at least one chain")

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        spec = self.network
        layers = []
        for layer in spec.layers:
            if layer.kind == "dense":
                layers.append({"kind": "dense", "in_width": layer.in_width, "out_width": layer.out_width, "has_bias": layer.has_bias})
            elif layer.kind == "conv":
                layers.append(
                    {
                        "kind": "conv",
                        "channels_in": layer.channels_in,
                        "channels_out": layer.channels_out,
                        "in_height": layer.in_height,
                        "in_width": layer.in_width,
                        "filter_height": layer.filter_height,
                        "filter_width": layer.filter_width,
                        "stride_y": layer.stride_y,
                        "stride_x": layer.stride_x,
                        "has_bias": layer.has_bias,
                    }
                )
            else:
                layers.append(
                    {
                        "kind": "pool",
                        "channels": layer.channels,
                        "in_height": layer.in_height,
                        "in_width": layer.in_width,
                        "window_height": layer.window_height,
                        "window_width": layer.window_width,
                    }
                )
        d = {
            "seed": self.seed,
            "sweeps": self.sweeps,
            "spacing": self.spacing,
            "max_seconds": self.max_seconds,
            "merge_window": self.merge_window,
            "merge_tolerance": self.merge_tolerance,
            "network": {"activation": spec.activation.value, "output": spec.output, "layers": layers},
            "noise": {
                "delta_z": {str(k): v for k, v in sorted(self.noise.delta_z.items())},
                "delta_x": {str(k): v for k, v in sorted(self.noise.delta_x.items())},
                "delta_pool": {str(k): v for k, v in sorted(self.noise.delta_pool.items())},
            },
            "prior": {
                "lambda_w": {str(k): v for k, v in sorted(self.prior.lambda_w.items())},
                "lambda_b": {str(k): v for k, v in sorted(self.prior.lambda_b.items())},
            },
            "dataset": {k: v for k, v in vars(self.dataset).items() if v is not None and v is not False},
            "sampler": {k: v for k, v in vars(self.sampler).items() if v is not None},
            "initializations": list(self.initializations),
        }
        if self.dataset.inline_inputs is not None:
            d["dataset"]["inline_inputs"] = _to_nested_list(self.dataset.inline_inputs)
            d["dataset"]["inline_labels"] = _to_nested_list(self.dataset.inline_labels)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            spec = _network_from_dict(raw["network"])
        except KeyError as exc:
            raise ConfigError(f"network: missing field {exc}") from exc
        noise = _noise_from_dict(raw.get("noise", {}), spec)
        prior = _prior_from_dict(raw.get("prior", {}), spec)
        dataset = _dataset_from_dict(raw.get("dataset", {}))
        sampler = _sampler_from_dict(raw.get("sampler", {}))
        cfg = cls(
            network=spec,
            noise=noise,
            prior=prior,
            dataset=dataset,
            sampler=sampler,
            initializations=tuple(raw.get("initializations", ())),
            sweeps=int(raw.get("sweeps", 1)),
            spacing=int(raw.get("spacing", 1)),
            seed=int(raw.get("seed", 0)),
            max_seconds=raw.get("max_seconds"),
            merge_window=int(raw.get("merge_window", 50)),
            merge_tolerance=float(raw.get("merge_tolerance", 3.0)),
        )
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def _to_nested_list(x):
    if isinstance(x, (list, tuple)):
        return [_to_nested_list(v) for v in x]
    return x


def _to_nested_tuple(x):
    if isinstance(x, (list, tuple)):
        return tuple(_to_nested_tuple(v) for v in x)
    return x


def _network_from_dict(raw: dict) -> NetworkSpec:
    layers = []
    for i, ld in enumerate(raw["layers"]):
        kind = ld.get("kind", "dense")
        try:
            if kind == "dense":
                layers.append(DenseLayer(ld["in_width"], ld["out_width"], ld.get("has_bias", True)))
            elif kind == "conv":
                layers.append(
                    ConvLayer(
                        channels_in=ld["channels_in"],
                        channels_out=ld["channels_out"],
                        in_height=ld["in_height"],
                        in_width=ld["in_width"],
                        filter_height=ld["filter_height"],
                        filter_width=ld["filter_width"],
                        stride_y=ld.get("stride_y", 1),
                        stride_x=ld.get("stride_x", 1),
                        has_bias=ld.get("has_bias", True),
                    )
                )
            elif kind == "pool":
                layers.append(
                    PoolLayer(
                        channels=ld["channels"],
                        in_height=ld["in_height"],
                        in_width=ld["in_width"],
                        window_height=ld["window_height"],
                        window_width=ld["window_width"],
                    )
                )
            else:
                raise ConfigError(f"network.layers[{i}].kind: unknown kind {kind!r}")
        except KeyError as exc:
            raise ConfigError(f"network.layers[{i}]: missing field {exc}") from exc
    try:
        return NetworkSpec(
            layers=tuple(layers),
            activation=Activation(raw.get("activation", "relu")),
            output=raw.get("output", OUTPUT_REGRESSION),
        )
    except ValueError as exc:
        raise ConfigError(f"network: {exc}") from exc


def _noise_from_dict(raw: dict, spec: NetworkSpec) -> NoiseSchedule:
    if "delta" in raw:
        return NoiseSchedule.uniform(spec, float(raw["delta"]))
    try:
        return NoiseSchedule(
            delta_z={int(k): float(v) for k, v in raw["delta_z"].items()},
            delta_x={int(k): float(v) for k, v in raw.get("delta_x", {}).items()},
            delta_pool={int(k): float(v) for k, v in raw.get("delta_pool", {}).items()},
        )
    except KeyError as exc:
        raise ConfigError(f"noise: missing field {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"noise: {exc}") from exc


def _prior_from_dict(raw: dict, spec: NetworkSpec) -> PriorSpec:
    if raw.get("mode") == "fan_in":
        return PriorSpec.fan_in(spec)
    if "lambda" in raw:
        return PriorSpec.uniform(spec, float(raw["lambda"]))
    try:
        return PriorSpec(
            lambda_w={int(k): float(v) for k, v in raw["lambda_w"].items()},
            lambda_b={int(k): float(v) for k, v in raw.get("lambda_b", {}).items()},
        )
    except KeyError as exc:
        raise ConfigError(f"prior: missing field {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"prior: {exc}") from exc


def _dataset_from_dict(raw: dict) -> DatasetConfig:
    source = raw.get("source")
    if source not in ("synthetic", "idx", "inline"):
        raise ConfigError(f"dataset.source: expected synthetic/idx/inline, got {source!r}")
    if source == "idx" and ("images" not in raw or "labels" not in raw):
        raise ConfigError("dataset: idx source needs images and labels paths")
    if source == "inline" and ("inline_inputs" not in raw or "inline_labels" not in raw):
        raise ConfigError("dataset: inline source needs inline_inputs and inline_labels")
    return DatasetConfig(
        source=source,
        n=raw.get("n"),
        n_test=int(raw.get("n_test", 0)),
        delta_gen=raw.get("delta_gen"),
        noiseless=bool(raw.get("noiseless", False)),
        images=raw.get("images"),
        labels=raw.get("labels"),
        test_images=raw.get("test_images"),
        test_labels=raw.get("test_labels"),
        subset=raw.get("subset"),
        test_subset=raw.get("test_subset"),
        inline_inputs=_to_nested_tuple(raw["inline_inputs"]) if source == "inline" else None,
        inline_labels=_to_nested_tuple(raw["inline_labels"]) if source == "inline" else None,
        path=raw.get("path"),
    )


def _sampler_from_dict(raw: dict) -> SamplerConfig:
    schedule = raw.get("schedule", {})
    return SamplerConfig(
        kind=raw.get("kind", "gibbs"),
        posterior=raw.get("posterior", "intermediate"),
        step_size=raw.get("step_size"),
        leapfrog_steps=raw.get("leapfrog_steps"),
        schedule_mode=raw.get("schedule_mode", schedule.get("mode", "sequential")),
        workers=int(raw.get("workers", schedule.get("workers", 1))),
    )


# -- dataset construction ------------------------------------------------


def build_dataset(cfg: ExperimentConfig, rng: RngStream) -> Dataset:
    dc = cfg.dataset
    spec = cfg.network
    if dc.path is not None:
        return ds.load_dataset(dc.path)
    if dc.source == "synthetic":
        n = dc.n
        if n in (None, "4x_params"):
            n = ds.four_times_params(spec)
        gen_noise = None
        if not dc.noiseless:
            delta_gen = dc.delta_gen
            if delta_gen is None:
                gen_noise = cfg.noise
            else:
                gen_noise = NoiseSchedule.uniform(spec, float(delta_gen))
        return ds.generate_teacher_student(
            spec, cfg.prior, int(n), dc.n_test, rng, noise_gen=gen_noise, noiseless=dc.noiseless
        )
    if dc.source == "idx":
        images, labels = ds.load_idx(dc.images, dc.labels, dc.subset)
        inputs = _shape_inputs(spec, images)
        test_inputs = test_labels = None
        if dc.test_images is not None:
            timg, tlab = ds.load_idx(dc.test_images, dc.test_labels, dc.test_subset)
            test_inputs, test_labels = _shape_inputs(spec, timg), tlab
        return Dataset(inputs=inputs, labels=labels, test_inputs=test_inputs, test_labels=test_labels)
    inputs = np.asarray(dc.inline_inputs, dtype=float)
    labels = np.asarray(dc.inline_labels)
    if spec.output == OUTPUT_REGRESSION:
        labels = labels.astype(float)
        if labels.ndim == 1:
            labels = labels.reshape(-1, 1)
    else:
        labels = labels.astype(int)
    return Dataset(inputs=_shape_inputs(spec, inputs), labels=labels)


def _shape_inputs(spec: NetworkSpec, flat: np.ndarray) -> np.ndarray:
    first = spec.layers[0]
    if first.kind == "conv":
        return flat.reshape(len(flat), first.channels_in, first.in_height, first.in_width)
    return flat.reshape(len(flat), -1)


# -- chain initialization -------------------------------------------------


def _clamped_top(spec: NetworkSpec, dataset: Dataset) -> np.ndarray:
    y = np.asarray(dataset.labels)
    if spec.output == OUTPUT_REGRESSION:
        y = y.astype(float)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        return y.copy()
    return y.astype(int)


def _repair_probit_top(z_top: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Swap each row's maximum into the label slot so the argmax holds."""
    z = z_top.copy()
    rows = np.arange(len(z))
    amax = z.argmax(axis=1)
    bad = amax != labels
    if bad.any():
        r = rows[bad]
        a, y = amax[bad], labels[bad]
        za, zy = z[r, a].copy(), z[r, y].copy()
        z[r, a], z[r, y] = zy, za
    return z


def initialize_chain(
    kind: str,
    dataset: Dataset,
    spec: NetworkSpec,
    noise: NoiseSchedule,
    prior: PriorSpec,
    rng: RngStream,
) -> ChainState:
    """Build a starting chain state: informed, zero, random, or gaussian(s).

    informed copies the stored teacher chain; zero sets every unclamped
    variable to zero (probit output scores get a consistent one-hot);
    random draws parameters from the prior and latents from a fresh pass
    of the generative process; gaussian:s draws everything i.i.d. N(0, s^2).
    """
    n = dataset.n
    big_l = spec.depth
    if kind == "informed":
        if dataset.teacher is None:
            raise MissingTeacher("informed initialization needs a dataset with a stored teacher")
        state = dataset.teacher.copy()
        state.X[1] = np.asarray(dataset.inputs, dtype=float)
        if spec.output == OUTPUT_PROBIT:
            state.labels = np.asarray(dataset.labels, dtype=int)
        else:
            state.Z[big_l + 1] = _clamped_top(spec, dataset)
        return state

    packer = posteriors.FlatPacker.for_intermediate(spec, n)
    shapes = {key: shp for key, (sl, shp) in packer.slices.items()}

    if kind == "random":
        W, b = ds.sample_prior_weights(spec, prior, rng)
        state, _ = forward_generate(spec, noise, W, b, np.asarray(dataset.inputs, dtype=float), rng)
        if spec.output == OUTPUT_PROBIT:
            y = np.asarray(dataset.labels, dtype=int)
            state.Z[big_l + 1] = _repair_probit_top(state.Z[big_l + 1], y)
            state.labels = y
        else:
            state.Z[big_l + 1] = _clamped_top(spec, dataset)
        return state

    if kind == "zero":
        make = lambda shape: np.zeros(shape)
    elif kind.startswith("gaussian:"):
        scale = float(kind.split(":", 1)[1])
        gen = rng.generator
        make = lambda shape: gen.normal(scale=scale, size=shape)
    else:
        raise ValueError(f"unknown initialization kind {kind!r}")

    state = ChainState(W={}, b={}, X={1: np.asarray(dataset.inputs, dtype=float)}, Z={}, P={})
    for (vk, l), shape in shapes.items():
        block = make(shape)
        if vk == "W":
            state.W[l] = block
        elif vk == "b":
            state.b[l] = block
        elif vk == "X":
            state.X[l] = block
        elif vk == "P":
            state.P[l] = block
        elif vk == "Z" and l <= big_l:
            state.Z[l] = block
    for l in range(1, big_l + 1):
        state.b.setdefault(l, None)
    if spec.output == OUTPUT_PROBIT:
        y = np.asarray(dataset.labels, dtype=int)
        top = make((n, spec.out_width))
        if kind == "zero":
            top[np.arange(n), y] = 1.0
        else:
            top = _repair_probit_top(top, y)
        state.Z[big_l + 1] = top
        state.labels = y
    else:
        state.Z[big_l + 1] = _clamped_top(spec, dataset)
    return state


# -- observables ----------------------------------------------------------


class _Observer:
    """Computes the named observable columns for one chain."""

    def __init__(self, cfg: ExperimentConfig, dataset: Dataset):
        self.cfg = cfg
        self.spec = cfg.network
        self.dataset = dataset
        self.delta = cfg.noise.output_delta
        spec = self.spec
        self.columns: list[str] = []
        if dataset.test_inputs is not None:
            if spec.output == OUTPUT_REGRESSION:
                self.columns.append("test_mse")
            else:
                self.columns.append("test_error")
                if dataset.teacher is not None:
                    self.columns.append("test_mse")
        self.differentiable = spec.activation is not Activation.SIGN
        if self.differentiable:
            self.columns.append("score_U")
        if cfg.sampler.posterior == "intermediate":
            self.columns.append("train_residual")
        if cfg.sampler.kind in ("hmc", "mala"):
            self.columns.append("acceptance_rate")
        self.columns += [f"w{l}_sqnorm" for l in range(1, spec.depth + 1)]
        self._imap = None
        if not spec.is_dense:
            self._imap = ConvIndexMap.for_layer(spec.layers[0])

    def _first_layer_mean(self, state: ChainState) -> np.ndarray:
        if self.spec.is_dense:
            mean = state.X[1] @ state.W[1].T
        else:
            mean = self._imap.conv_mean(state.W[1], state.X[1])
        if state.b.get(1) is not None:
            bias = state.b[1]
            if not self.spec.is_dense:
                bias = bias[None, :, None, None]
            mean = mean + bias
        return mean

    def observe_state(self, state: ChainState, acceptance: float | None = None) -> dict[str, float]:
        spec, dataset = self.spec, self.dataset
        out: dict[str, float] = {}
        if "test_mse" in self.columns:
            if dataset.teacher is not None:
                out["test_mse"] = test_mse(spec, state.W, state.b, dataset.teacher.W, dataset.teacher.b, dataset.test_inputs)
            else:
                pred = predict(spec, state.W, state.b, dataset.test_inputs)
                y = np.asarray(dataset.test_labels, dtype=float).reshape(pred.shape)
                out["test_mse"] = float(np.sum((pred - y) ** 2) / len(pred))
        if "test_error" in self.columns:
            out["test_error"] = test_error(spec, state.W, state.b, dataset.test_inputs, dataset.test_labels)
        if "score_U" in self.columns:
            if self.cfg.sampler.posterior == "intermediate":
                _, grads = posteriors.intermediate_log_posterior(state, spec, self.cfg.noise, self.cfg.prior)
            else:
                _, grads = posteriors.classical_log_posterior(state.W, state.b, dataset, spec, self.delta, self.cfg.prior)
            out["score_U"] = float(self.delta * np.mean(grads["W"][1]))
        if "train_residual" in self.columns:
            resid = state.Z[2] - self._first_layer_mean(state)
            out["train_residual"] = float(np.sum(resid * resid))
        if acceptance is not None:
            out["acceptance_rate"] = acceptance
        for l in range(1, spec.depth + 1):
            out[f"w{l}_sqnorm"] = float(np.sum(state.W[l] * state.W[l]))
        return out


# -- experiment run -------------------------------------------------------


def _chain_label(idx: int, kind: str) -> str:
    return f"chain{idx}_{kind.replace(':', '')}"


def _write_trace(path: Path, columns: list[str], rows: list[tuple[int, float, dict]]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sweep,wall_s," + ",".join(columns) + "\n")
        for sweep, wall, values in rows:
            cells = [str(int(sweep)), f"{wall:.3f}"]
            cells += [f"{values[c]:.17g}" for c in columns]
            fh.write(",".join(cells) + "\n")


def read_trace(path) -> dict[str, diagnostics.TraceSeries]:
    """Parse one trace CSV into a TraceSeries per observable column."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        raw = [line.strip().split(",") for line in fh if line.strip()]
    if header[:2] != ["sweep", "wall_s"]:
        raise ValueError(f"{path}: not a trace file (header {header[:2]})")
    data = np.asarray(raw, dtype=float)
    times = data[:, 0].astype(int)
    wall = data[:, 1]
    out = {}
    for j, name in enumerate(header[2:], start=2):
        out[name] = diagnostics.TraceSeries(times=times, values=data[:, j], wall=wall)
    return out


def _run_single_chain(cfg: ExperimentConfig, dataset: Dataset, idx: int, kind: str, deadline: float | None):
    spec = cfg.network
    chain_rng = RngStream(cfg.seed, (idx,))
    observer = _Observer(cfg, dataset)
    rows: list[tuple[int, float, dict]] = []
    start = time.monotonic()

    def due(t):
        return t % cfg.spacing == 0

    if cfg.sampler.kind == "gibbs":
        state = initialize_chain(kind, dataset, spec, cfg.noise, cfg.prior, chain_rng.child(0))
        sweep_rng = chain_rng.child(1)
        schedule = gibbs.SweepSchedule(cfg.sampler.schedule_mode, cfg.sampler.workers)
        rows.append((0, 0.0, observer.observe_state(state)))
        for t in range(1, cfg.sweeps + 1):
            gibbs.gibbs_sweep(state, spec, cfg.noise, cfg.prior, schedule, sweep_rng)
            if due(t):
                rows.append((t, time.monotonic() - start, observer.observe_state(state)))
            if deadline is not None and time.monotonic() > deadline:
                if not due(t):
                    rows.append((t, time.monotonic() - start, observer.observe_state(state)))
                break
        final_state = state
        acceptance = None
    else:
        if cfg.sampler.posterior == "classical":
            target, packer = posteriors.make_classical_target(dataset, spec, cfg.noise.output_delta, cfg.prior)
        else:
            target, packer = posteriors.make_intermediate_target(dataset, spec, cfg.noise, cfg.prior)
        init_state = initialize_chain(kind, dataset, spec, cfg.noise, cfg.prior, chain_rng.child(0))
        parts = {"W": init_state.W, "b": init_state.b, "X": init_state.X, "Z": init_state.Z, "P": init_state.P}
        position = packer.pack(parts)
        if cfg.sampler.kind == "hmc":
            settings = samplers.HmcSettings(cfg.sampler.step_size, cfg.sampler.leapfrog_steps)
            stepper = lambda x, r: samplers.hmc_step(x, target, settings, r)[:2]
        else:
            settings = samplers.MalaSettings(cfg.sampler.step_size)
            stepper = lambda x, r: samplers.mala_step(x, target, settings, r)
        step_rng = chain_rng.child(1)

        def state_of(vec):
            parts = packer.unpack(vec)
            st = ChainState(
                W=parts["W"],
                b={l: parts.get("b", {}).get(l) for l in range(1, spec.depth + 1)},
                X={1: np.asarray(dataset.inputs, dtype=float), **parts.get("X", {})},
                Z=dict(parts.get("Z", {})),
                P=dict(parts.get("P", {})),
                labels=init_state.labels,
            )
            if (spec.depth + 1) not in st.Z:
                st.Z[spec.depth + 1] = _clamped_top(spec, dataset)
            return st

        accepted = 0
        rows.append((0, 0.0, observer.observe_state(state_of(position), acceptance=0.0)))
        for t in range(1, cfg.sweeps + 1):
            position, ok = stepper(position, step_rng)
            accepted += bool(ok)
            if due(t):
                rows.append((t, time.monotonic() - start, observer.observe_state(state_of(position), acceptance=accepted / t)))
            if deadline is not None and time.monotonic() > deadline:
                if not due(t):
                    rows.append((t, time.monotonic() - start, observer.observe_state(state_of(position), acceptance=accepted / t)))
                break
        final_state = state_of(position)
        acceptance = accepted / t
    return rows, observer.columns, final_state, acceptance


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Run all configured chains, persist traces, and summarize.

    One trace CSV per chain plus a ``summary.json`` holding final
    observables, acceptance rates, stationarity onsets, and (when an
    informed chain exists) the merge verdict of every other chain against
    the informed equilibrium. Returns the summary dict.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg, RngStream(cfg.seed, (10_000,)))
    deadline = None
    if cfg.max_seconds is not None:
        deadline = time.monotonic() + float(cfg.max_seconds)

    jobs = list(enumerate(cfg.initializations))
    results = {}
    with ThreadPoolExecutor(max_workers=max(1, len(jobs))) as pool:
        futures = {
            pool.submit(_run_single_chain, cfg, dataset, idx, kind, deadline): (idx, kind) for idx, kind in jobs
        }
        for fut, (idx, kind) in futures.items():
            results[(idx, kind)] = fut.result()

    summary = {"chains": [], "merge": {}, "config": cfg.to_dict()}
    traces = {}
    for (idx, kind), (rows, columns, final_state, acceptance) in sorted(results.items()):
        label = _chain_label(idx, kind)
        path = out / f"trace_{label}.csv"
        _write_trace(path, columns, rows)
        traces[label] = (kind, path, rows, columns)
        entry = {
            "label": label,
            "initialization": kind,
            "file": path.name,
            "records": len(rows),
            "final": {c: rows[-1][2][c] for c in columns},
        }
        if acceptance is not None:
            entry["acceptance_rate"] = acceptance
        summary["chains"].append(entry)

    merge_obs = _merge_observable(traces)
    if merge_obs is not None:
        informed_label = next((lab for lab, (kind, *_rest) in traces.items() if kind == "informed"), None)
        if informed_label is not None:
            informed_series = _series_from_rows(traces[informed_label][2], merge_obs)
            log_scaled = merge_obs == "test_mse"
            for label, (kind, path, rows, columns) in traces.items():
                if label == informed_label:
                    continue
                series = _series_from_rows(rows, merge_obs)
                try:
                    when, phi = diagnostics.teacher_student_merge(
                        informed_series,
                        series,
                        window=cfg.merge_window,
                        tolerance_sigmas=cfg.merge_tolerance,
                        log_values=log_scaled,
                    )
                    summary["merge"][label] = {
                        "observable": merge_obs,
                        "merge_time": None if when is None else int(when),
                        "equilibrium": phi,
                    }
                except (diagnostics.InformedNotStationary, ValueError) as exc:
                    summary["merge"][label] = {"observable": merge_obs, "error": str(exc)}

    with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return summary


def _merge_observable(traces) -> str | None:
    for obs in ("test_mse", "test_error", "w1_sqnorm"):
        if all(obs in columns for (_k, _p, _rows, columns) in traces.values()):
            return obs
    return None


def _series_from_rows(rows, column) -> diagnostics.TraceSeries:
    times = np.asarray([r[0] for r in rows])
    values = np.asarray([r[2][column] for r in rows], dtype=float)
    return diagnostics.TraceSeries(times=times, values=values)
