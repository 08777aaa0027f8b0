"""Parameter containers and standard layers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Tuple

import numpy as np

from drfuser import ops
from drfuser.errors import IntegrityError
from drfuser.tensor import Tensor, default_dtype


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return parameter(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))


class Module:
    """Walks its attributes to find parameters, buffers and submodules.

    Attributes that are trainable tensors become parameters, numpy arrays
    become buffers (e.g. batch-norm running statistics), and modules or
    lists of modules are recursed into. Names follow attribute order.
    """

    training: bool = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise IntegrityError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise IntegrityError(f"{name}: stored shape {src.shape} != model shape {arr.shape}")
            arr[...] = src

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer in place to ``dtype``."""
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                    value.grad = None
                elif isinstance(value, np.ndarray) and np.issubdtype(value.dtype, np.floating):
                    setattr(m, name, value.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True):
        self.weight = he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int):
        self.weight = he_normal(rng, (d_out, d_in), d_in)
        self.bias = parameter(np.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Dropout(Module):
    """Seeded dropout; the owning model supplies ``seed`` per forward pass."""

    def __init__(self, keep_prob: float):
        self.keep_prob = keep_prob

    def forward(self, x: Tensor, seed: int) -> Tensor:
        return ops.dropout(x, self.keep_prob, seed, training=self.training)


def conv_bn(rng, c_in: int, c_out: int, kernel: int, stride: int) -> Tuple[Conv2d, BatchNorm2d]:
    """Bias-free convolution followed by batch norm, ResNet style."""
    return Conv2d(rng, c_in, c_out, kernel, stride, kernel // 2, bias=False), BatchNorm2d(c_out)


class BasicBlock(Module):
    """Two 3x3 conv-BN layers with an identity or projected shortcut."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int):
        self.conv1, self.bn1 = conv_bn(rng, c_in, c_out, 3, stride)
        self.conv2, self.bn2 = conv_bn(rng, c_out, c_out, 3, 1)
        if stride != 1 or c_in != c_out:
            self.proj, self.proj_bn = conv_bn(rng, c_in, c_out, 1, stride)
        else:
            self.proj = self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        short = x if self.proj is None else self.proj_bn(self.proj(x))
        return ops.relu(h + short)
