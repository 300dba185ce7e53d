"""Small layer library on top of the tape: parameter registry, linears,
norms, convolutions. Modules register parameters/buffers/children
automatically on attribute assignment; names compose hierarchically for
checkpointing.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(8):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2 * std, 2 * std).astype(np.float32)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            (self._params if value.requires_grad else self._buffers)[name] = value
            object.__setattr__(self, name, value)
        elif isinstance(value, Module):
            self._children[name] = value
            object.__setattr__(self, name, value)
        else:
            object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def param_scalar_count(self):
        return sum(p.size for p in self.parameters())

    # checkpoint interface; subclasses may override to reshape their export
    def state_arrays(self, prefix=""):
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p.data
        for name, b in self._buffers.items():
            out[prefix + name] = b.data
        for cname, child in self._children.items():
            out.update(child.state_arrays(prefix + cname + "."))
        return out

    def load_state_arrays(self, arrays, prefix=""):
        own = dict(self._params)
        own.update(self._buffers)
        for name, t in own.items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"checkpoint manifest mismatch: missing array {key!r}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(t.data.shape):
                raise ValueError(
                    f"checkpoint manifest mismatch: {key!r} has shape "
                    f"{tuple(arr.shape)}, expected {tuple(t.data.shape)}"
                )
            t.data[...] = arr.astype(t.data.dtype)
        for cname, child in self._children.items():
            child.load_state_arrays(arrays, prefix + cname + ".")


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m):
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Identity(Module):
    def forward(self, x):
        return x


class Linear(Module):
    """y = x @ weight + bias, weight stored [d_in, d_out]."""

    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = Tensor(trunc_normal(rng, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, self.d_in))
        y = T.matmul(flat, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return T.reshape(y, lead + (self.d_out,))


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, np.float32), requires_grad=True)

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, axis=-1, eps=self.eps)


class InstanceNorm2d(Module):
    """Per-sample, per-channel normalization over H, W of NCHW."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gamma = Tensor(np.ones((channels, 1, 1), np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros((channels, 1, 1), np.float32), requires_grad=True)

    def forward(self, x):
        return T.normalize_affine(x, self.gamma, self.beta, axes=(2, 3), eps=self.eps)


class BatchNorm2d(Module):
    """NCHW batch norm; biased variance both for normalization and for the
    running estimate (simpler, and eval matches train on converged stats)."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones((channels, 1, 1), np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros((channels, 1, 1), np.float32), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, np.float32))
        self.running_var = Tensor(np.ones(channels, np.float32))

    def forward(self, x):
        if self.training:
            mu = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean.data[...] = (1 - m) * self.running_mean.data + m * mu
            self.running_var.data[...] = (1 - m) * self.running_var.data + m * var
            return T.normalize_affine(x, self.gamma, self.beta, axes=(0, 2, 3), eps=self.eps)
        inv = (1.0 / np.sqrt(self.running_var.data + self.eps)).astype(np.float32)
        scale = Tensor((inv[:, None, None]))
        mean = Tensor(self.running_mean.data[:, None, None])
        xhat = T.mul(T.sub(x, mean), scale)
        return T.add(T.mul(xhat, self.gamma), self.beta)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, padding=0, bias=True):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.padding = c_in, c_out, kernel, padding
        std = float(np.sqrt(2.0 / (c_in * kernel * kernel)))
        w = rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class ConvTranspose2d(Module):
    """Kernel == stride (non-overlapping) transposed convolution."""

    def __init__(self, c_in, c_out, stride, rng, bias=True):
        super().__init__()
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        std = float(np.sqrt(2.0 / (c_in * stride * stride)))
        w = rng.normal(0.0, std, size=(c_in, c_out, stride, stride)).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)
