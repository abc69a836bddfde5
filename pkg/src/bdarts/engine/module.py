"""Minimal parameter containers.

A ``Module`` discovers its parameters by walking attributes in definition
order: parameter tensors, child modules, and lists/dicts of child modules.
Calling a module runs ``forward`` inside a profiling scope named after its
attribute path, so per-layer summaries can be attributed.
"""

import numpy as np

from . import functional as F
from .profile import scope
from .tensor import DEFAULT_DTYPE, Tensor


def parameter(shape, rng=None, fan_in=None, fill=None, name=None, dtype=DEFAULT_DTYPE):
    """A trainable leaf. Uniform(+-1/sqrt(fan_in)) unless ``fill`` is given."""
    if fill is not None:
        data = np.full(shape, fill, dtype=dtype)
    else:
        bound = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


class Module:
    _path = ""

    def __call__(self, *args, **kwargs):
        with scope(self._path):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Tensor, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{key}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, (Tensor, Module)):
                        yield f"{key}.{k}", item

    def named_parameters(self, prefix=""):
        seen = set()
        for key, val in self._children():
            full = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad and id(val) not in seen:
                    seen.add(id(val))
                    yield full, val
            else:
                for name, p in val.named_parameters(prefix=full + "."):
                    if id(p) not in seen:
                        seen.add(id(p))
                        yield name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix=""):
        yield prefix, self
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_modules(prefix=f"{prefix}.{key}" if prefix else key)

    def assign_names(self):
        """Stamp every submodule and parameter with its attribute path."""
        for path, mod in self.named_modules():
            mod._path = path.rsplit(".", 1)[-1] if path else ""
        for name, p in self.named_parameters():
            p.name = name
        return self

    def set_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, dilation=1, groups=1, rng=None):
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        fan_in = (cin // groups) * kernel * kernel
        self.weight = parameter((cout, cin // groups, kernel, kernel), rng, fan_in=fan_in)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, affine=True, eps=1e-5):
        self.eps = eps
        self.affine = affine
        if affine:
            self.gain = parameter((channels,), fill=1.0)
            self.bias = parameter((channels,), fill=0.0)

    def affine_params(self):
        return (self.gain, self.bias) if self.affine else (None, None)

    def forward(self, x):
        gain, bias = self.affine_params()
        return F.batchnorm2d(x, gain, bias, self.eps)


class ConvBN(Module):
    """Convolution followed by batch normalization, fused into one tape node."""

    def __init__(self, cin, cout, kernel, stride=1, padding=0, dilation=1, groups=1, affine=True, rng=None):
        self.conv = Conv2d(cin, cout, kernel, stride, padding, dilation, groups, rng=rng)
        self.bn = BatchNorm2d(cout, affine=affine)

    def forward(self, x):
        c = self.conv
        gain, bias = self.bn.affine_params()
        return F.conv_bn(x, c.weight, c.stride, c.padding, c.dilation, c.groups, gain, bias, self.bn.eps)


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng=None):
        self.weight = parameter((fan_out, fan_in), rng, fan_in=fan_in)
        self.bias = parameter((fan_out,), rng, fan_in=fan_in)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)
