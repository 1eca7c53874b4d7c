#!/usr/bin/env python3
"""
RCTrans Desk - Neural Network Layers

Parameter containers built on the tensor engine: Module with named parameter
discovery, Linear, LayerNorm, Conv2d, MLP, FeedForward and multi-head
attention. Layers are channels-last and unbatched.
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .configuration import ConfigurationValidationError
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data: np.ndarray, name: Optional[str] = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """
    Base class for layers.

    Parameters and sub-modules are discovered from instance attributes in
    assignment order; lists of modules are named ``<attr>.<index>``.
    """

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} has no forward")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        found: List[Tuple[str, Parameter]] = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                found.append((name, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Parameter):
                        found.append((f"{name}.{i}", item))
        return found

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data = value.copy()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Sequence[int]) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape))


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        exact: bool = False,
    ):
        self.weight = Parameter(xavier_uniform(rng, in_features, out_features, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None
        self.exact = exact

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias, exact=self.exact)


class LayerNorm(Module):
    def __init__(self, dims: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dims))
        self.bias = Parameter(np.zeros(dims))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, eps=self.eps)


class Conv2d(Module):
    """Channels-last 2D convolution; padding defaults to kernel_size // 2."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator, stride: int = 1):
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        self.weight = Parameter(
            xavier_uniform(rng, fan_in, fan_out, (kernel_size, kernel_size, in_channels, out_channels))
        )
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.strided_conv2d(x, self.weight, self.bias, stride=self.stride)


class MLP(Module):
    """Linear layers with relu between them (none after the last)."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, exact: bool = False):
        if len(dims) < 2:
            raise ConfigurationValidationError("MLP needs at least input and output widths")
        self.layers = [Linear(a, b, rng, exact=exact) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x

    @property
    def head(self) -> Linear:
        return self.layers[-1]


class FeedForward(Module):
    def __init__(self, dims: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dims, hidden, rng)
        self.fc2 = Linear(hidden, dims, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention over ``heads`` heads.

    q: [Lq, D], k and v: [Lk, D] -> [Lq, D]. The attention weights of the last
    call are kept in ``last_weights`` ([heads, Lq, Lk]) for inspection.
    """

    def __init__(self, dims: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dims % heads != 0:
            raise ConfigurationValidationError(f"embedding dims {dims} not divisible by {heads} heads")
        self.dims = dims
        self.heads = heads
        self.q_proj = Linear(dims, dims, rng)
        self.k_proj = Linear(dims, dims, rng)
        self.v_proj = Linear(dims, dims, rng)
        self.out_proj = Linear(dims, dims, rng)
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        return multi_head_attention(q, k, v, self.heads, self)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, attn: MultiHeadAttention) -> Tensor:
    dims = attn.dims
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.ndim != 2 or t.shape[1] != dims:
            raise ConfigurationValidationError(f"attention {name} must be [L, {dims}], got {t.shape}")
    if k.shape[0] != v.shape[0]:
        raise T.DimensionError(f"keys ({k.shape[0]}) and values ({v.shape[0]}) differ in length")
    if dims % heads != 0:
        raise ConfigurationValidationError(f"embedding dims {dims} not divisible by {heads} heads")

    head_dim = dims // heads
    lq, lk = q.shape[0], k.shape[0]
    qh = attn.q_proj(q).reshape(lq, heads, head_dim).transpose(1, 0, 2)
    kh = attn.k_proj(k).reshape(lk, heads, head_dim).transpose(1, 2, 0)
    vh = attn.v_proj(v).reshape(lk, heads, head_dim).transpose(1, 0, 2)

    scores = T.matmul(qh, kh) * (1.0 / math.sqrt(head_dim))
    weights = T.softmax(scores, axis=-1)
    attn.last_weights = weights.data
    context = T.matmul(weights, vh).transpose(1, 0, 2).reshape(lq, dims)
    return attn.out_proj(context)
