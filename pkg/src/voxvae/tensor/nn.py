"""Weight-normalized layers and a minimal module container."""
import numpy as np

from . import autograd as ag
from .config import default_dtype


class Module:
    training = True

    def named_parameters(self, prefix=""):
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, ag.Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays):
        for name, p in self.named_parameters():
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype)


def he_direction(rng, shape, fan_in, dtype):
    """He (fan-in) normal init; the gain starts at the per-channel norm so w = v."""
    v = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    g = np.sqrt(np.sum(v * v, axis=tuple(range(1, len(shape)))))
    return v.astype(dtype), g.astype(dtype)


class WNConv3d(Module):
    def __init__(self, cin, cout, kernel, stride, padding, rng, dtype=None):
        dtype = dtype or default_dtype()
        v, g = he_direction(rng, (cout, cin, kernel, kernel, kernel), cin * kernel**3, dtype)
        self.v = ag.Parameter(v)
        self.g = ag.Parameter(g)
        self.b = ag.Parameter(np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        w = ag.weight_normalize(self.v, self.g)
        return ag.conv3d(x, w, self.b, self.stride, self.padding)


class WNLinear(Module):
    def __init__(self, n_in, n_out, rng, dtype=None, gain=1.0):
        dtype = dtype or default_dtype()
        v, g = he_direction(rng, (n_out, n_in), n_in, dtype)
        self.v = ag.Parameter(v)
        self.g = ag.Parameter((g * gain).astype(dtype))
        self.b = ag.Parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x):
        w = ag.weight_normalize(self.v, self.g)
        return ag.matmul(x, ag.transpose(w)) + self.b


class WNConvTranspose1x1(Module):
    def __init__(self, cin, cout, rng, dtype=None):
        dtype = dtype or default_dtype()
        v, g = he_direction(rng, (cout, cin), cin, dtype)
        self.v = ag.Parameter(v)
        self.g = ag.Parameter(g)
        self.b = ag.Parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x):
        w = ag.weight_normalize(self.v, self.g)
        return ag.conv_transpose3d_1x1(x, ag.transpose(w), self.b)


class ResBlock(Module):
    """conv3(stride) -> ELU -> conv3 plus a skip path, ELU after the sum.

    The skip is the identity when shapes agree, otherwise a strided 1x1x1 conv.
    """

    def __init__(self, cin, cout, stride, rng, dtype=None):
        self.conv1 = WNConv3d(cin, cout, 3, stride, 1, rng, dtype)
        self.conv2 = WNConv3d(cout, cout, 3, 1, 1, rng, dtype)
        self.skip = None if (cin == cout and stride == 1) else WNConv3d(cin, cout, 1, stride, 0, rng, dtype)

    def __call__(self, x):
        h = ag.elu(self.conv1(x))
        h = self.conv2(h)
        s = x if self.skip is None else self.skip(x)
        return ag.elu(h + s)
