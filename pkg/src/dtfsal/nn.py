"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal container: tracks Parameters and sub-Modules by attribute order.

    Attribute insertion order is deterministic, so parameter names (dotted
    paths) are stable across runs with the same construction code, which is
    what checkpoints key on.
    """

    def __init__(self):
        self._training = True

    def modules(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self) -> "Module":
        self._training = True
        for _, m in self.modules():
            m.train()
        return self

    def eval(self) -> "Module":
        self._training = False
        for _, m in self.modules():
            m.eval()
        return self

    @property
    def training(self) -> bool:
        return self._training

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, arr in self.named_buffers():
            state[name] = arr.copy()
        return state

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, _Buffer):
                yield prefix + name, value.array
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching entries in place; returns the names that were missing."""
        params = dict(self.named_parameters())
        buffers = {name: buf for name, buf in self._buffer_objects()}
        missing = []
        for name, target in list(params.items()) + list(buffers.items()):
            if name not in state:
                missing.append(name)
                continue
            src = np.asarray(state[name])
            if isinstance(target, Parameter):
                if src.shape != target.data.shape:
                    raise ShapeError(f"checkpoint entry '{name}' has shape {src.shape}, expected {target.data.shape}")
                target.data = src.astype(target.data.dtype).copy()
            else:
                target.array[...] = src.astype(target.array.dtype)
        if strict and missing:
            raise KeyError(f"checkpoint is missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        return missing

    def _buffer_objects(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, _Buffer):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value._buffer_objects(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._buffer_objects(f"{prefix}{name}.{i}.")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class _Buffer:
    """Non-trainable state (e.g. batch-norm running statistics)."""

    __slots__ = ("array",)

    def __init__(self, array: np.ndarray):
        self.array = np.asarray(array)


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / max(1, fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv3d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel,
        stride=(1, 1, 1),
        padding=(0, 0, 0),
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
        zero_init: bool = False,
    ):
        super().__init__()
        kernel = ops._triple(kernel)
        self.stride = ops._triple(stride)
        self.padding = ops._triple(padding)
        fan_in = in_channels * int(np.prod(kernel))
        shape = (out_channels, in_channels, *kernel)
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        else:
            if rng is None:
                raise ValueError("Conv3d needs an rng unless zero_init=True")
            w = he_init(rng, shape, fan_in, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
        zero_init: bool = False,
    ):
        super().__init__()
        if zero_init:
            w = np.zeros((out_features, in_features), dtype=dtype)
        else:
            if rng is None:
                raise ValueError("Linear needs an rng unless zero_init=True")
            w = he_init(rng, (out_features, in_features), in_features, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ChannelLayerNorm(Module):
    """Layer norm over the channel axis of [N, C, T, H, W], with affine."""

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        y = ops.layer_norm(x, axes=(1,), eps=self.eps)
        g = self.gamma.reshape((1, -1, 1, 1, 1))
        b = self.beta.reshape((1, -1, 1, 1, 1))
        return y * g + b


class LastAxisLayerNorm(Module):
    """Layer norm over the trailing feature axis of [.., D], with affine."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        y = ops.layer_norm(x, axes=(x.ndim - 1,), eps=self.eps)
        return y * self.gamma + self.beta


class BatchNorm3d(Module):
    """Batch norm over (N, T, H, W) per channel.

    Train mode normalizes with current-batch statistics (works with batch
    size 1 because T*H*W samples the distribution); eval mode applies the
    running estimates.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = _Buffer(np.zeros(channels, dtype=dtype))
        self.running_var = _Buffer(np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5:
            raise ShapeError("BatchNorm3d expects [N, C, T, H, W]")
        if self.training:
            y = ops.normalize(x, axes=(0, 2, 3, 4), eps=self.eps)
            batch_mean = x.data.mean(axis=(0, 2, 3, 4))
            batch_var = x.data.var(axis=(0, 2, 3, 4))
            m = self.momentum
            self.running_mean.array[...] = (1 - m) * self.running_mean.array + m * batch_mean
            self.running_var.array[...] = (1 - m) * self.running_var.array + m * batch_var
        else:
            mean = Tensor(self.running_mean.array.reshape(1, -1, 1, 1, 1))
            std = Tensor(np.sqrt(self.running_var.array + self.eps).reshape(1, -1, 1, 1, 1))
            y = (x - mean) / std
        g = self.gamma.reshape((1, -1, 1, 1, 1))
        b = self.beta.reshape((1, -1, 1, 1, 1))
        return y * g + b
