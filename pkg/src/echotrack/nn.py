"""Parameter containers, layer specs, the Adam optimizer, and a small
sequential network with the explicit forward/backward surface used by the
trainable models (VAE, denoiser, CNN baseline)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .numerics import RngStream


class ParamStore:
    """Named float64 parameter tensors plus their Adam moments."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.skipped = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.asarray(value, dtype=np.float64)

    def names(self) -> list[str]:
        return list(self.params)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            out[f"{prefix}param/{name}"] = p
            out[f"{prefix}adam_m/{name}"] = self.m[name]
            out[f"{prefix}adam_v/{name}"] = self.v[name]
        out[f"{prefix}meta"] = np.array([self.step, self.skipped], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name in self.params:
            self.params[name] = np.array(arrays[f"{prefix}param/{name}"], dtype=np.float64)
            self.m[name] = np.array(arrays[f"{prefix}adam_m/{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"{prefix}adam_v/{name}"], dtype=np.float64)
        meta = arrays[f"{prefix}meta"]
        self.step, self.skipped = int(meta[0]), int(meta[1])


def glorot_uniform(stream: RngStream, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return stream.uniform(int(np.prod(shape)), -bound, bound).reshape(shape)


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction. Tensors with non-finite
    gradients are skipped and counted in store.skipped."""
    store.step += 1
    t = store.step
    for name, g in grads.items():
        if name not in store.params:
            raise ConfigError(f"gradient for unknown parameter {name!r}")
        if g.shape != store.params[name].shape:
            raise DimensionError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            store.skipped += 1
            continue
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        m_hat = store.m[name] / (1.0 - beta1**t)
        v_hat = store.v[name] / (1.0 - beta2**t)
        store.params[name] = store.params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description; `dims` meaning depends on the kind:
    dense (in, out); conv1d (in_channels, out_channels, kernel[, stride]);
    layer_norm (dim,); residual_add carries a sub-stack in `inner`."""

    kind: str
    dims: tuple[int, ...] = ()
    inner: tuple["LayerSpec", ...] = ()


_KINDS = {"dense", "conv1d", "relu", "silu", "global_avg_pool", "layer_norm", "residual_add"}


def _infer_shape(spec: LayerSpec, shape: tuple[int, ...], where: str) -> tuple[int, ...]:
    """Static shape propagation; raises on any incompatibility so nothing
    broadcasts silently at run time. Shapes exclude the batch axis."""
    if spec.kind not in _KINDS:
        raise ConfigError(f"{where}: unknown layer kind {spec.kind!r}")
    if spec.kind == "dense":
        if len(shape) != 1 or shape[0] != spec.dims[0]:
            raise ConfigError(f"{where}: dense expects ({spec.dims[0]},), got {shape}")
        return (spec.dims[1],)
    if spec.kind == "conv1d":
        if len(shape) != 2 or shape[0] != spec.dims[0]:
            raise ConfigError(f"{where}: conv1d expects channels {spec.dims[0]}, got {shape}")
        stride = spec.dims[3] if len(spec.dims) > 3 else 1
        return (spec.dims[1], -(-shape[1] // stride))
    if spec.kind == "global_avg_pool":
        if len(shape) != 2:
            raise ConfigError(f"{where}: global_avg_pool expects (channels, length), got {shape}")
        return (shape[0],)
    if spec.kind == "layer_norm":
        if shape[-1] != spec.dims[0]:
            raise ConfigError(f"{where}: layer_norm dim {spec.dims[0]} != feature {shape[-1]}")
        return shape
    if spec.kind == "residual_add":
        inner_shape = shape
        for i, sub in enumerate(spec.inner):
            inner_shape = _infer_shape(sub, inner_shape, f"{where}.inner[{i}]")
        if inner_shape != shape:
            raise ConfigError(f"{where}: residual branch maps {shape} -> {inner_shape}")
        return shape
    return shape  # relu / silu


class Network:
    """Sequential network over LayerSpecs with cached-forward semantics.

    forward() runs the net and caches the tape; backward() turns an output
    gradient into parameter gradients plus the input gradient.
    """

    def __init__(self, specs: list[LayerSpec], input_shape: tuple[int, ...], store: ParamStore | None = None, prefix: str = ""):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            shape = _infer_shape(spec, shape, f"layer {i} ({spec.kind})")
        self.output_shape = shape
        self._output: Tensor | None = None
        self._input: Tensor | None = None

    def init_params(self, stream: RngStream) -> None:
        def init_spec(spec: LayerSpec, path: str):
            if spec.kind == "dense":
                fan_in, fan_out = spec.dims
                self.store.add(f"{path}.w", glorot_uniform(stream, fan_in, fan_out, (fan_in, fan_out)))
                self.store.add(f"{path}.b", np.zeros(fan_out))
            elif spec.kind == "conv1d":
                c_in, c_out, k = spec.dims[:3]
                self.store.add(f"{path}.w", glorot_uniform(stream, c_in * k, c_out * k, (c_out, c_in, k)))
                self.store.add(f"{path}.b", np.zeros(c_out))
            elif spec.kind == "layer_norm":
                self.store.add(f"{path}.gamma", np.ones(spec.dims[0]))
                self.store.add(f"{path}.beta", np.zeros(spec.dims[0]))
            elif spec.kind == "residual_add":
                for j, sub in enumerate(spec.inner):
                    init_spec(sub, f"{path}.inner{j}")

        for i, spec in enumerate(self.specs):
            init_spec(spec, f"{self.prefix}{i}")

    def _apply(self, x: Tensor, tensors: dict[str, Tensor]) -> Tensor:
        def apply_spec(spec: LayerSpec, path: str, h: Tensor) -> Tensor:
            if spec.kind == "dense":
                return ag.dense(h, tensors[f"{path}.w"], tensors[f"{path}.b"])
            if spec.kind == "conv1d":
                stride = spec.dims[3] if len(spec.dims) > 3 else 1
                return ag.conv1d(h, tensors[f"{path}.w"], tensors[f"{path}.b"], stride)
            if spec.kind == "relu":
                return ag.relu(h)
            if spec.kind == "silu":
                return ag.silu(h)
            if spec.kind == "global_avg_pool":
                return ag.global_avg_pool(h)
            if spec.kind == "layer_norm":
                return ag.layer_norm(h, tensors[f"{path}.gamma"], tensors[f"{path}.beta"])
            branch = h
            for j, sub in enumerate(spec.inner):
                branch = apply_spec(sub, f"{path}.inner{j}", branch)
            return ag.add(h, branch)

        for i, spec in enumerate(self.specs):
            x = apply_spec(spec, f"{self.prefix}{i}", x)
        return x

    def param_tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(value) for name, value in self.store.params.items()}

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        expected = self.input_shape
        batched = x.ndim == len(expected) + 1
        if (batched and x.shape[1:] != expected) or (not batched and x.shape != expected):
            raise DimensionError(f"input shape {x.shape} incompatible with {expected}")
        inp = Tensor(x if batched else x[None, ...])
        self._tensors = self.param_tensors()
        self._input = inp
        self._output = self._apply(inp, self._tensors)
        out = self._output.data
        return out if batched else out[0]

    def backward(self, output_grad: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        if self._output is None:
            raise RuntimeError("backward() called without a cached forward()")
        g = np.asarray(output_grad, dtype=np.float64)
        if g.shape != self._output.data.shape:
            if g.shape == self._output.data.shape[1:]:
                g = g[None, ...]
            else:
                raise DimensionError(
                    f"output gradient shape {g.shape} != {self._output.data.shape}"
                )
        self._output.backward(g)
        grads = {name: t.grad for name, t in self._tensors.items()}
        input_grad = self._input.grad
        self._output = None
        return grads, input_grad
