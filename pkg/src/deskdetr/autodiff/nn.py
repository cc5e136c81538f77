"""Parameter containers and the layer zoo used by the detector."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import ConfigError
from . import functional as F
from .tensor import Tensor, default_dtype


class Parameter(Tensor):
    """Leaf tensor that always requires grad."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.asarray(data, dtype=default_dtype()), requires_grad=True, name=name)


class Module:
    """Minimal module tree: attributes that are Parameters / Modules / lists of Modules."""

    def __init__(self) -> None:
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    # -- traversal --------------------------------------------------------
    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self._buffers.items():
            yield prefix + key, val
        for name, child in self.named_children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # -- mode / dtype -----------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for k in m._buffers:
                m._buffers[k] = m._buffers[k].astype(dtype)
        return self

    # -- state ------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        owners: dict[str, tuple[Module, str]] = {}
        for mod_name, mod in self._named_modules():
            for key in mod._buffers:
                owners[mod_name + key] = (mod, key)
        missing = (set(params) | set(owners)) - set(state)
        unexpected = set(state) - set(params) - set(owners)
        if strict and (missing or unexpected):
            raise ConfigError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.data.shape != arr.shape:
                    raise ConfigError(f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
                p.data = np.array(arr, dtype=p.data.dtype)
            elif name in owners:
                mod, key = owners[name]
                mod._buffers[key] = np.array(arr, dtype=mod._buffers[key].dtype)

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child._named_modules(prefix + name + ".")


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x W + b, weight stored as [in, out]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = Parameter(_uniform(rng, (in_dim, out_dim), math.sqrt(3.0) * bound))
        self.bias = Parameter(_uniform(rng, (out_dim,), bound)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, bias: bool = True):
        super().__init__()
        fan_in = in_ch * k * k
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.weight = Parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    """Batch statistics while training, running statistics in eval mode."""

    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(ch))
        self.bias = Parameter(np.zeros(ch))
        self.momentum = momentum
        self.eps = eps
        self._buffers["running_mean"] = np.zeros(ch, dtype=default_dtype())
        self._buffers["running_var"] = np.ones(ch, dtype=default_dtype())

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    def forward(self, x: Tensor) -> Tensor:
        if self.training and x.ndim == 4:
            out, mu, var = F.batch_norm_train(x, self.gain, self.bias, self.eps)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (n / max(n - 1, 1))
            m = self.momentum
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            self._buffers["running_mean"] = ((1 - m) * rm + m * mu).astype(rm.dtype)
            self._buffers["running_var"] = ((1 - m) * rv + m * unbiased).astype(rv.dtype)
            return out
        return F.batch_norm_inference(x, self.running_mean, self.running_var, self.gain, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, 1.0, size=(num, dim)))

    def forward(self, idx: np.ndarray) -> Tensor:
        return F.index(self.weight, np.asarray(idx))


class MLP(Module):
    """Stack of Linear layers with ReLU between them."""

    def __init__(self, dims: list[int], rng: np.random.Generator, act: str = "relu"):
        super().__init__()
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.activation(x, self.act)
        return x


class MultiheadAttention(Module):
    """Scaled dot-product attention over [N, L, C] with ``nheads`` heads.

    ``mask`` is a boolean [Lq, Lk] (or broadcastable) array where True blocks
    attention. The last attention map is kept on ``last_weights`` for probes.
    """

    def __init__(self, dim: int, nheads: int, rng: np.random.Generator):
        super().__init__()
        if dim % nheads:
            raise ConfigError(f"embed dim {dim} not divisible by nheads {nheads}")
        self.dim, self.nheads = dim, nheads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        n, l, _ = x.shape
        return x.reshape(n, l, self.nheads, self.dim // self.nheads).transpose(0, 2, 1, 3)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        n, lq, _ = q.shape
        qh = self._heads(self.q_proj(q)) * (1.0 / math.sqrt(self.dim // self.nheads))
        kh = self._heads(self.k_proj(k))
        vh = self._heads(self.v_proj(v))
        scores = qh @ kh.transpose(0, 1, 3, 2)
        if mask is not None:
            scores = scores + np.where(mask, -1e9, 0.0).astype(scores.dtype)
        attn = F.softmax(scores, axis=-1)
        self.last_weights = attn.data
        out = (attn @ vh).transpose(0, 2, 1, 3).reshape(n, lq, self.dim)
        return self.out_proj(out)
