"""
Parameter containers and the reusable layers every block is built from.
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from dual_branch_sam.exceptions import DimensionError, FormatError
from dual_branch_sam.tensor import (
    Tensor,
    batch_norm,
    conv2d,
    conv_transpose2d,
    depthwise_conv2d,
    dropout,
    gelu,
    layer_norm,
    linear,
    softmax,
)
from dual_branch_sam.tensor.serialization import TensorRecord
from dual_branch_sam.tensor.kernels import Padding

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A leaf tensor owned by a module. Frozen parameters never require grad."""

    def __init__(self, data, frozen: bool = False, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=not frozen, name=name, dtype=dtype)

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    @frozen.setter
    def frozen(self, value: bool):
        self.requires_grad = not value


class Module:
    """
    Tree of named parameters, buffers and child modules.

    Attributes assigned as :class:`Parameter` or :class:`Module` are registered
    automatically; buffers (running statistics) go through
    :meth:`register_buffer`. ``rng`` drives dropout and drop-path and is shared
    down the tree by :meth:`set_rng`.
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "rng", np.random.default_rng(0))

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    # -- traversal ---------------------------------------------------------

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._modules.items())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._modules.items():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, child in self._modules.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, array in self._buffers.items():
            yield prefix + name, array
        for name, child in self._modules.items():
            yield from child.named_buffers(prefix + name + ".")

    def trainable_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not p.frozen]

    def frozen_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.frozen]

    def parameter_count(self, frozen: Optional[bool] = None) -> int:
        return sum(p.size for _, p in self.named_parameters() if frozen is None or p.frozen == frozen)

    # -- state -------------------------------------------------------------

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = True
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_rng(self, rng: np.random.Generator) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "rng", rng)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_records(self) -> List[TensorRecord]:
        """Parameters then buffers, in registration order; buffers are stored as frozen."""
        records = [TensorRecord(name, p.data, p.frozen) for name, p in self.named_parameters()]
        records += [TensorRecord(name, array, True) for name, array in self.named_buffers()]
        return records

    def load_records(self, records: List[TensorRecord], strict: bool = True):
        """
        Copy tensors into the matching parameters and buffers (in place, keeping
        each tensor's dtype). Frozen flags are taken from the records.

        Raises
        ------
        FormatError
            When ``strict`` and names are missing or unexpected.
        DimensionError
            When a stored shape differs from the module's.
        """
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        by_name = {rec.name: rec for rec in records}
        if strict:
            missing = sorted((set(params) | set(buffers)) - set(by_name))
            unexpected = sorted(set(by_name) - set(params) - set(buffers))
            if missing or unexpected:
                raise FormatError(f"checkpoint mismatch: missing {missing}, unexpected {unexpected}")
        for name, rec in by_name.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                continue
            if target.shape != rec.array.shape:
                raise DimensionError(f"{name}: stored shape {rec.array.shape} vs model shape {target.shape}")
            target[...] = rec.array
            if name in params:
                params[name].frozen = rec.frozen


class ModuleList(Module):
    """Ordered children named ``"0"``, ``"1"``, ..."""

    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._modules[str(len(self._modules))] = module

    def __getitem__(self, index: int) -> Module:
        return self._modules[str(index)]

    def __len__(self):
        return len(self._modules)

    def __iter__(self):
        return iter(self._modules.values())


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """``y = x @ W + b`` with ``W [in, out]``; ``zero`` initializes both to 0."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False, dtype="float32"):
        super().__init__()
        shape = (in_dim, out_dim)
        self.weight = Parameter(np.zeros(shape, dtype) if zero else _uniform(rng, shape, in_dim, dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects last extent {self.weight.shape[0]}, got input {x.shape}")
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype="float32"):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype))
        self.bias = Parameter(np.zeros(dim, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype="float32"):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels, dtype))
        self.bias = Parameter(np.zeros(channels, dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype))
        self.register_buffer("running_var", np.ones(channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, pad: Padding = 0, zero: bool = False, dtype="float32"):
        super().__init__()
        self.stride = stride
        self.pad = pad
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(np.zeros(shape, dtype) if zero else _uniform(rng, shape, fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator, pad: Padding = 0,
                 dtype="float32"):
        super().__init__()
        self.pad = pad
        shape = (channels, kernel_size, kernel_size)
        self.weight = Parameter(_uniform(rng, shape, kernel_size * kernel_size, dtype))
        self.bias = Parameter(np.zeros(channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return depthwise_conv2d(x, self.weight, 1, self.pad) + self.bias.reshape(1, -1, 1, 1)


class ConvTranspose2d(Module):
    """Kernel 2, stride 2: doubles both spatial extents."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype="float32"):
        super().__init__()
        shape = (in_channels, out_channels, 2, 2)
        self.weight = Parameter(_uniform(rng, shape, in_channels * 4, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, stride=2)


class MLP(Module):
    """Linear -> GELU -> dropout -> Linear."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator,
                 drop_rate: float = 0.0, zero_out: bool = False, dtype="float32"):
        super().__init__()
        self.drop_rate = drop_rate
        self.fc1 = Linear(in_dim, hidden_dim, rng, dtype=dtype)
        self.fc2 = Linear(hidden_dim, out_dim, rng, zero=zero_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        hidden = dropout(gelu(self.fc1(x)), self.drop_rate, self.training, self.rng)
        return self.fc2(hidden)


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention with ``num_heads`` heads over the last axis.

    Parameters
    ----------
    dim : int
        Model width; must be divisible by ``num_heads``.
    zero_out : bool
        Zero-initialize the output projection (residual branch starts at 0).
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, zero_out: bool = False,
                 dtype="float32"):
        super().__init__()
        if dim % num_heads:
            raise DimensionError(f"attention width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = Linear(dim, dim, rng, dtype=dtype)
        self.k_proj = Linear(dim, dim, rng, dtype=dtype)
        self.v_proj = Linear(dim, dim, rng, dtype=dtype)
        self.out_proj = Linear(dim, dim, rng, zero=zero_out, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, n_q, d = q.shape
        if k.shape[:2] != v.shape[:2] or k.shape[0] != b:
            raise DimensionError(f"attention: query {q.shape}, key {k.shape}, value {v.shape}")
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        out = softmax(scores, axis=-1) @ vh
        return self.out_proj(out.transpose(0, 2, 1, 3).reshape(b, n_q, d))


def count_by_prefix(module: Module) -> Dict[str, Tuple[int, int]]:
    """``child name -> (trainable, frozen)`` element counts, for the build log."""
    counts = {}
    for name, child in module.children():
        counts[name] = (child.parameter_count(frozen=False), child.parameter_count(frozen=True))
    return counts
