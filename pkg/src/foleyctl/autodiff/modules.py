"""Layer abstractions: parameter registration, state dicts, standard layers.

Modules register any Tensor attribute with ``requires_grad`` as a parameter
and any Module attribute as a child, so ``parameters()`` and ``state_dict()``
walk the tree with dotted names. Buffers hold non-learned state such as
batch-norm running statistics.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidInput, ShapeError
from . import ops
from .tensor import Tensor, as_tensor, matmul


def parameter(data) -> Tensor:
    t = Tensor(np.asarray(data))
    t.requires_grad = True
    return t


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base class; subclasses assign parameters and children as attributes."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    # -- traversal ----------------------------------------------------------

    def named_parameters(self, prefix: str = ""):
        """Trainable parameters only; frozen tensors are invisible here."""
        for name, p in self._params.items():
            if p.requires_grad:
                yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    # -- modes --------------------------------------------------------------

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        """Mark every parameter as non-trainable (gradients stop here)."""
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for _, p in self._walk_all_params():
            p.requires_grad = True
        return self

    def _walk_all_params(self, prefix: str = ""):
        # like named_parameters, but also reaches frozen tensors
        for name, value in list(vars(self).items()):
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self._children.items():
            yield from child._walk_all_params(prefix + name + ".")

    def zero_grad(self):
        for _, p in self._walk_all_params():
            p.zero_grad()

    # -- serialization ------------------------------------------------------

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self._walk_all_params()}
        for name, b in self.named_buffers():
            state[name] = np.array(b, copy=True)
        return state

    def load_state_dict(self, state: dict):
        own = dict(self._walk_all_params())
        bufs = dict(self.named_buffers())
        for name, value in state.items():
            if name in own:
                target = own[name].data
            elif name in bufs:
                target = bufs[name]
            else:
                raise InvalidInput(f"unexpected entry in state dict: {name!r}")
            value = np.asarray(value)
            if target.shape != value.shape:
                raise ShapeError(f"size mismatch for {name!r}", target.shape, value.shape)
            target[...] = value
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise InvalidInput(f"missing entries in state dict: {sorted(missing)}")
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for item in items:
            self.append(item)

    def append(self, module: Module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """y = x @ w + b with w of shape (in_features, out_features)."""

    def __init__(self, in_features, out_features, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.w = parameter(
            xavier_uniform(rng, (in_features, out_features), in_features, out_features, dtype)
        )
        self.b = parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x):
        y = matmul(x, self.w)
        return y + self.b if self.b is not None else y


class Conv1d(Module):
    def __init__(self, in_ch, out_ch, kernel_size, rng, stride=1, padding=0,
                 bias=True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel_size
        fan_out = out_ch * kernel_size
        self.w = parameter(
            xavier_uniform(rng, (out_ch, in_ch, kernel_size), fan_in, fan_out, dtype)
        )
        self.b = parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x):
        return ops.conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def zero_(self):
        """Zero all parameters; used for residual branches that must start inert."""
        self.w.data[...] = 0.0
        if self.b is not None:
            self.b.data[...] = 0.0
        return self


class ConvTranspose1d(Module):
    def __init__(self, in_ch, out_ch, kernel_size, rng, stride=1, padding=0,
                 bias=True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel_size
        fan_out = out_ch * kernel_size
        self.w = parameter(
            xavier_uniform(rng, (in_ch, out_ch, kernel_size), fan_in, fan_out, dtype)
        )
        self.b = parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x):
        return ops.conv_transpose1d(x, self.w, self.b, stride=self.stride,
                                    padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = parameter(np.ones(dim, dtype=dtype))
        self.beta = parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class BatchNorm1d(Module):
    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter(np.ones(num_features, dtype=dtype))
        self.beta = parameter(np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=np.float64))
        self.register_buffer("running_var", np.ones(num_features, dtype=np.float64))

    def forward(self, x):
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Embedding(Module):
    def __init__(self, num_embeddings, dim, rng, dtype=np.float32):
        super().__init__()
        self.table = parameter((rng.standard_normal((num_embeddings, dim)) * 0.02).astype(dtype))

    def forward(self, indices):
        return ops.embedding(self.table, indices)


class MultiHeadAttention(Module):
    """Self- or cross-attention over (B, T, D) token sequences."""

    def __init__(self, dim, num_heads, rng, context_dim=None, dtype=np.float32):
        super().__init__()
        if dim % num_heads:
            raise InvalidInput(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        kv_dim = context_dim if context_dim is not None else dim
        self.wq = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.wk = Linear(kv_dim, dim, rng, bias=False, dtype=dtype)
        self.wv = Linear(kv_dim, dim, rng, bias=False, dtype=dtype)
        self.wo = Linear(dim, dim, rng, dtype=dtype)

    def _split(self, x, batch, tokens):
        # (B, T, D) -> (B, H, T, head_dim)
        return x.reshape(batch, tokens, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x, context=None):
        source = x if context is None else context
        b, t = x.shape[0], x.shape[1]
        s = source.shape[1]
        q = self._split(self.wq(x), b, t)
        k = self._split(self.wk(source), b, s)
        v = self._split(self.wv(source), b, s)
        attended = ops.scaled_dot_product_attention(q, k, v)
        merged = attended.transpose(0, 2, 1, 3).reshape(b, t, self.num_heads * self.head_dim)
        return self.wo(merged)
