"""Minimal module system: parameter registration, train/eval state, dtype."""

import numpy as np

from . import functional as F
from .tensor import Tensor


def param(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    def __init__(self):
        self._training = True
        self._buffers = []

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- traversal ------------------------------------------------------------

    def _children(self):
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._children():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.named_modules(sub)

    def modules(self):
        for _, m in self.named_modules():
            yield m

    def named_parameters(self, prefix=""):
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}.{name}" if prefix else name), value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield (f"{prefix}.{name}.{i}" if prefix else f"{name}.{i}"), item
        for name, child in self._children():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.named_parameters(sub)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, child in self._children():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.named_buffers(sub)

    def register_buffer(self, name, array):
        setattr(self, name, array)
        self._buffers.append(name)

    # -- state ----------------------------------------------------------------

    def train(self, mode=True):
        for m in self.modules():
            m._training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self):
        return self._training

    def astype(self, dtype):
        """Convert parameters and buffers in place (gradcheck runs in float64)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for m in self.modules():
            for name in m._buffers:
                arr = getattr(m, name)
                if isinstance(arr, np.ndarray) and arr.dtype.kind == "f":
                    setattr(m, name, arr.astype(dtype))
        return self

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Identity(Module):
    def forward(self, x):
        return x


class Conv2d(Module):
    """Plain convolution; padding defaults to k//2 ("same" for odd k, s=1)."""

    def __init__(self, c1, c2, k=1, s=1, p=None, bias=False, rng=None):
        super().__init__()
        self.stride = s
        self.padding = k // 2 if p is None else p
        std = float(np.sqrt(2.0 / (c1 * k * k)))
        rng = rng or np.random.default_rng(0)
        self.w = param(rng.standard_normal((c2, c1, k, k)) * std)
        self.b = param(np.zeros(c2)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.w, self.b, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c, eps=1e-3, momentum=0.03):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))
        self.register_buffer("running_mean", np.zeros(c, dtype=np.float32))
        self.register_buffer("running_var", np.ones(c, dtype=np.float32))

    def forward(self, x):
        return F.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, d_in, d_out, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        std = float(np.sqrt(1.0 / d_in))
        self.w = param(rng.standard_normal((d_in, d_out)) * std)
        self.b = param(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return F.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)
