"""Parameter containers shared by blocks, the supernet and decoded networks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T


class Module:
    """Minimal parameter tree.  Subclasses assign ``Tensor`` parameters and
    child modules as attributes; ``named_parameters`` walks them in
    assignment order."""

    def __init__(self):
        object.__setattr__(self, "_order", [])

    def __setattr__(self, name, value):
        if isinstance(value, (T.Tensor, Module, ModuleList)) and name not in self._order:
            self._order.append(name)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, T.Tensor]]:
        for name in self._order:
            value = getattr(self, name)
            full = f"{prefix}{name}"
            if isinstance(value, T.Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[T.Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList:
    def __init__(self, items=()):
        self.items = list(items)

    def append(self, item):
        self.items.append(item)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self.items):
            yield from m.named_parameters(f"{prefix}{i}.")


def kaiming(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> T.Tensor:
    std = np.sqrt(gain / fan_in)
    data = rng.normal(0.0, std, size=shape).astype(T.get_default_dtype())
    return T.Tensor(data, requires_grad=True)


def zeros_param(shape) -> T.Tensor:
    return T.Tensor(np.zeros(shape, dtype=T.get_default_dtype()), requires_grad=True)


class ConvUnit(Module):
    """conv -> bias -> optional relu (no normalisation layers)."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, dilation=1, groups=1, act=True):
        super().__init__()
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.dilation, self.groups, self.act = stride, dilation, groups, act
        self.padding = dilation * (kernel - 1) // 2
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = kaiming(rng, (c_out, c_in // groups, kernel, kernel), fan_in, 2.0 if act else 1.0)
        self.bias = zeros_param((c_out,))

    def forward(self, x):
        y = T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                     dilation=self.dilation, groups=self.groups)
        return T.relu(y) if self.act else y


class Linear(Module):
    def __init__(self, d_in, d_out, rng, act=False):
        super().__init__()
        self.act = act
        self.weight = kaiming(rng, (d_out, d_in), d_in, 2.0 if act else 1.0)
        self.bias = zeros_param((d_out,))

    def forward(self, x):
        y = T.linear(x, self.weight, self.bias)
        return T.relu(y) if self.act else y
