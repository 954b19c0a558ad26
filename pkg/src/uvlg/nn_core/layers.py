"""Parameter containers and the layers used by the encoder-decoder."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import ops
from .tensor import Parameter, ShapeError, Tensor, default_dtype


class ConfigError(ValueError):
    pass


class Module:
    """Minimal parameter container.

    Attributes holding a :class:`Parameter` or another :class:`Module` are
    registered in assignment order; ``named_parameters`` walks them to build
    dot-separated names. A Parameter reachable from several paths (tying) is
    reported once, under the first path found.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
            self._modules.pop(key, None)
        elif isinstance(value, Module):
            self._modules[key] = value
            self._params.pop(key, None)
        object.__setattr__(self, key, value)

    def _walk(self, prefix=""):
        for k, p in self._params.items():
            yield prefix + k, p
        for k, m in self._modules.items():
            yield from m._walk(prefix + k + ".")

    def named_parameters(self):
        seen = set()
        for name, p in self._walk():
            if id(p) in seen:
                continue
            seen.add(id(p))
            yield name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_paths(self) -> dict:
        """Map every attribute path to the canonical name of its storage cell."""
        canon = {}
        paths = {}
        for name, p in self._walk():
            canon.setdefault(id(p), name)
            paths[name] = canon[id(p)]
        return paths

    def tying_groups(self) -> list:
        groups = OrderedDict()
        for path, cname in self.parameter_paths().items():
            groups.setdefault(cname, []).append(path)
        return [g for g in groups.values() if len(g) > 1]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for k, arr in state.items():
            if k not in own:
                continue
            p = own[k]
            arr = np.asarray(arr)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} vs model shape {p.data.shape}")
            # write in place so every alias keeps observing the same cell
            p.data[...] = arr.astype(p.data.dtype)


def _normal(rng, shape, std):
    return (rng.standard_normal(shape) * std).astype(default_dtype())


class Linear(Module):
    def __init__(self, din: int, dout: int, rng, bias: bool = True, std: float | None = None, name: str = ""):
        super().__init__()
        std = 1.0 / math.sqrt(din) if std is None else std
        self.weight = Parameter(_normal(rng, (din, dout), std), name=f"{name}.weight")
        if bias:
            self.bias = Parameter(np.zeros(dout, dtype=default_dtype()), name=f"{name}.bias")
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6, name: str = ""):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(d, dtype=default_dtype()), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(d, dtype=default_dtype()), name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num: int, d: int, rng, std: float = 0.02, name: str = ""):
        super().__init__()
        self.weight = Parameter(_normal(rng, (num, d), std), name=f"{name}.weight")

    def __call__(self, ids) -> Tensor:
        return ops.embedding(self.weight, ids)


class MLP(Module):
    """Two-layer perceptron with GELU."""

    def __init__(self, din: int, hidden: int, dout: int, rng, name: str = ""):
        super().__init__()
        self.fc1 = Linear(din, hidden, rng, name=f"{name}.fc1")
        self.fc2 = Linear(hidden, dout, rng, name=f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


def multi_head_attention(q_in, kv_in, wq, wk, wv, wo, heads: int, mask=None, bias=None) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads.

    q_in: (B, Tq, d); kv_in: (B, Tk, d); projection weights (d, d).
    mask: bool (B, Tq, Tk), True marks a disallowed key for that query.
    bias: tensor (H, Tq, Tk) added to the logits of every batch element.
    """
    q_in, kv_in = ops.as_tensor(q_in), ops.as_tensor(kv_in)
    if q_in.ndim != 3 or kv_in.ndim != 3 or q_in.shape[0] != kv_in.shape[0] or q_in.shape[2] != kv_in.shape[2]:
        raise ShapeError(f"attention: query {q_in.shape} vs key/value {kv_in.shape}")
    B, Tq, d = q_in.shape
    Tk = kv_in.shape[1]
    if d % heads:
        raise ConfigError(f"hidden dim {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(x, T):
        return ops.transpose(ops.reshape(x, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(ops.linear(q_in, wq), Tq)
    k = split(ops.linear(kv_in, wk), Tk)
    v = split(ops.linear(kv_in, wv), Tk)
    scores = ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(dh))
    if bias is not None:
        bias = ops.as_tensor(bias)
        if bias.shape != (heads, Tq, Tk):
            raise ShapeError(f"attention: bias shape {bias.shape}, expected {(heads, Tq, Tk)}")
        scores = ops.add(scores, ops.expand(bias, (B, heads, Tq, Tk)))
    if mask is None:
        probs = ops.softmax(scores)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (B, Tq, Tk):
            raise ShapeError(f"attention: mask shape {mask.shape}, expected {(B, Tq, Tk)}")
        probs = ops.masked_softmax(scores, np.broadcast_to(mask[:, None], (B, heads, Tq, Tk)))
    ctx = ops.matmul(probs, v)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
    return ops.linear(ctx, wo)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng, name: str = ""):
        super().__init__()
        if d % heads:
            raise ConfigError(f"hidden dim {d} is not divisible by {heads} heads")
        self.heads = heads
        std = 1.0 / math.sqrt(d)
        self.wq = Parameter(_normal(rng, (d, d), std), name=f"{name}.wq")
        self.wk = Parameter(_normal(rng, (d, d), std), name=f"{name}.wk")
        self.wv = Parameter(_normal(rng, (d, d), std), name=f"{name}.wv")
        self.wo = Parameter(_normal(rng, (d, d), std), name=f"{name}.wo")

    def __call__(self, q_in, kv_in, mask=None, bias=None) -> Tensor:
        return multi_head_attention(q_in, kv_in, self.wq, self.wk, self.wv, self.wo,
                                    self.heads, mask=mask, bias=bias)


class ModuleList(Module):
    """Ordered children registered under their index."""

    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]
