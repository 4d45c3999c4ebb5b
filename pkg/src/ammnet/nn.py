"""Layer primitives, parameter bookkeeping, initialization and AdamW."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np

from . import profiler as _prof
from . import tensor as T
from .errors import DimensionError, InvariantError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor that remembers how it should be initialized."""

    __slots__ = ("init", "fan_in")

    def __init__(self, data, init: str = "kaiming", fan_in: int | None = None):
        super().__init__(data, requires_grad=True)
        self.init = init
        self.fan_in = fan_in


class ParamStore(OrderedDict):
    """Ordered ``name -> Tensor`` map with unique hierarchical names."""

    def __setitem__(self, key, value):
        if key in self:
            raise InvariantError(f"duplicate parameter name {key!r}")
        super().__setitem__(key, value)

    @classmethod
    def from_module(cls, module: "Module") -> "ParamStore":
        store = cls()
        for name, p in module.named_parameters():
            store[name] = p
        return store

    def count(self) -> int:
        return sum(p.size for p in self.values())


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules():
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules():
            for name in mod._buffers:
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        state.update((n, b.copy()) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if missing or unexpected:
            raise InvariantError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for mod_name, mod in self.named_modules():
            pre = f"{mod_name}." if mod_name else ""
            for name, p in mod._params.items():
                src = np.asarray(state[pre + name])
                if src.shape != p.shape:
                    raise InvariantError(f"shape mismatch for {pre + name}: {src.shape} vs {p.shape}")
                p.data = src.astype(p.dtype, copy=True)
            for name, buf in mod._buffers.items():
                src = np.asarray(state[pre + name])
                if src.shape != buf.shape:
                    raise InvariantError(f"shape mismatch for {pre + name}: {src.shape} vs {buf.shape}")
                buf[...] = src

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((out_features, in_features)), "kaiming", in_features)
        self.bias = Parameter(np.zeros(out_features), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape (..., in)."""
    x = T.as_tensor(x)
    if x.shape[-1] != layer.in_features:
        raise DimensionError(
            f"linear layer expects last extent {layer.in_features}, got input shape {x.shape}"
        )
    lead = x.shape[:-1]
    flat = x.reshape(-1, layer.in_features) if x.ndim != 2 else x
    out = T.matmul(flat, layer.weight.T)
    if layer.bias is not None:
        out = out + layer.bias
    if x.ndim != 2:
        out = out.reshape(lead + (layer.out_features,))
    if _prof.active():
        n = int(np.prod(lead)) if lead else 1
        flops = 2 * n * layer.in_features * layer.out_features
        if layer.bias is not None:
            flops += n * layer.out_features
        _prof.record(layer, "linear", flops, layer.param_count(), out.shape)
    return out


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int | None = None, bias: bool = False):
        super().__init__()
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.pad = k // 2 if pad is None else pad
        self.weight = Parameter(np.zeros((out_ch, in_ch, k, k)), "kaiming", in_ch * k * k)
        self.bias = Parameter(np.zeros(out_ch), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, self.bias, self.stride, self.pad)
        if _prof.active():
            B, O, H, W = out.shape
            flops = 2 * B * O * H * W * self.in_ch * self.k * self.k
            if self.bias is not None:
                flops += out.size
            _prof.record(self, "conv2d", flops, self.param_count(), out.shape)
        return out


class BatchNorm(Module):
    """Batch normalization over channel axis 1 of N×C or B×C×H×W inputs."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(np.ones(channels), "ones")
        self.beta = Parameter(np.zeros(channels), "zeros")
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm_forward(self, x, self.training)


def batchnorm_forward(layer: BatchNorm, x: Tensor, training: bool) -> Tensor:
    out = T.batch_norm(
        x, layer.gamma, layer.beta, layer.running_mean, layer.running_var, training, layer.momentum, layer.eps
    )
    if _prof.active():
        _prof.record(layer, "batchnorm", 2 * out.size, layer.param_count(), out.shape)
    return out


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(x)
        if _prof.active():
            _prof.record(self, "relu", out.size, 0, out.shape)
        return out


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x


def conv_bn_relu(in_ch: int, out_ch: int, k: int = 3, stride: int = 1) -> Sequential:
    return Sequential(Conv2d(in_ch, out_ch, k, stride), BatchNorm(out_ch), ReLU())


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------
def init_params(store: Mapping[str, Tensor], seed: int) -> None:
    """Initialize parameters in store order from a single seeded generator.

    Weights use Kaiming-normal fan-in scaling (variance 2/fan_in), biases and
    batch-norm shifts are zero, batch-norm scales are one.
    """
    rng = np.random.default_rng(seed)
    for name, p in store.items():
        kind = getattr(p, "init", None) or ("zeros" if name.endswith(("bias", "beta")) else "kaiming")
        if kind == "zeros":
            p.data = np.zeros(p.shape, dtype=p.dtype)
        elif kind == "ones":
            p.data = np.ones(p.shape, dtype=p.dtype)
        else:
            fan_in = getattr(p, "fan_in", None) or int(np.prod(p.shape[1:]))
            std = math.sqrt(2.0 / fan_in)
            p.data = (rng.standard_normal(p.shape) * std).astype(p.dtype)
        p.grad = None


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------
def cosine_factor(t: float, total: float) -> float:
    """Cosine annealing multiplier ½(1 + cos(π t / T)), clamped to t ∈ [0, T]."""
    if total <= 0:
        return 1.0
    t = min(max(t, 0.0), total)
    return 0.5 * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: Mapping[str, np.ndarray] | None = None, lr_scale: float = 1.0) -> None:
        if grads is None:
            grads = {n: p.grad for n, p in self.params.items()}
        for name in self.params:
            if grads.get(name) is None:
                raise InvariantError(f"no gradient supplied for parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        lr = self.lr * lr_scale
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        decay = 1.0 - lr * self.weight_decay
        inv_c2 = 1.0 / np.sqrt(c2)
        step = lr / c1
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=p.dtype)
            if g.shape != p.shape:
                raise InvariantError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            m, v = self.m[name], self.v[name]
            # in-place updates keep the pass count over large weights low
            tmp = np.multiply(g, 1 - b1)
            m *= b1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1 - b2
            v *= b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= inv_c2
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= step
            if self.weight_decay:
                p.data *= decay
            p.data -= tmp

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for n in self.params:
            self.m[n] = np.array(state["m"][n], dtype=self.params[n].dtype)
            self.v[n] = np.array(state["v"][n], dtype=self.params[n].dtype)


def adamw_step(opt: AdamW, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr_scale: float = 1.0):
    """Apply one AdamW update to ``params`` in place and return them."""
    if params is not opt.params:
        missing = [n for n in params if n not in opt.params]
        if missing:
            raise InvariantError(f"optimizer does not track parameters {missing}")
    opt.step(grads, lr_scale)
    return params
