"""Multi-scale convolution: a learned convex mixture of dilated convolutions.

All branches share one kernel (unless ``share_kernel=False``) and differ
only in dilation; each branch is padded by ``d * (k - 1) / 2`` so the
outputs line up. Mixture weights are a softmax over free logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Module, Tensor, parameter


@dataclass
class MSConvConfig:
    dilations: tuple[int, ...] = (1, 2, 3, 4, 5)
    share_kernel: bool = True
    fuse_after_activation: bool = True

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if not self.dilations:
            raise ValueError("dilations must be non-empty")
        if any(d < 1 for d in self.dilations):
            raise ValueError(f"dilations must be positive, got {self.dilations}")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ValueError(f"dilations must be strictly increasing, got {self.dilations}")


class MultiScaleConv(Module):
    def __init__(self, kernel: np.ndarray, bias: np.ndarray, config: MSConvConfig | None = None,
                 logits: np.ndarray | None = None):
        self.config = config or MSConvConfig()
        cout, _, k, k2 = kernel.shape
        if k != k2 or k % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
        n = len(self.config.dilations)
        if self.config.share_kernel:
            self.kernel = parameter(kernel)
            self.kernels = []
        else:
            self.kernel = None
            self.kernels = [parameter(kernel) for _ in range(n)]
        self.bias = parameter(bias)
        self.mixture_logits = parameter(np.zeros(n) if logits is None else logits)

    @classmethod
    def init(cls, cin: int, cout: int, k: int, rng: np.random.Generator,
             config: MSConvConfig | None = None) -> MultiScaleConv:
        std = np.sqrt(2.0 / (cin * k * k))
        return cls(rng.normal(0.0, std, size=(cout, cin, k, k)), np.zeros(cout), config)

    @property
    def dilations(self) -> tuple[int, ...]:
        return self.config.dilations

    @property
    def kernel_size(self) -> int:
        w = self.kernel if self.kernel is not None else self.kernels[0]
        return w.shape[-1]

    @property
    def in_channels(self) -> int:
        w = self.kernel if self.kernel is not None else self.kernels[0]
        return w.shape[1]

    @property
    def per_branch_padding(self) -> list[int]:
        return [d * (self.kernel_size - 1) // 2 for d in self.dilations]

    def mixture_weights(self) -> np.ndarray:
        return T.softmax(Tensor(self.mixture_logits.data.astype(np.float64))).data

    def branch_kernel(self, i: int) -> Tensor:
        return self.kernel if self.kernel is not None else self.kernels[i]

    def branches(self, x: Tensor) -> list[Tensor]:
        """Per-dilation conv outputs before activation."""
        if x.shape[1] != self.in_channels:
            raise T.ShapeError("msconv", "in_channels", x.shape[1], self.in_channels)
        k = self.kernel_size
        for d in self.dilations:
            need = d * (k - 1) + 1
            if x.shape[2] < need or x.shape[3] < need:
                raise ValueError(f"msconv: spatial extent {x.shape[2:]} too small for dilation {d} "
                                 f"(needs >= {need})")
        return [T.conv2d(x, self.branch_kernel(i), self.bias, dilation=d, padding=p)
                for i, (d, p) in enumerate(zip(self.dilations, self.per_branch_padding))]

    def forward(self, x: Tensor) -> Tensor:
        w = T.softmax(self.mixture_logits)
        outs = self.branches(x)
        if self.config.fuse_after_activation:
            outs = [T.relu(o) for o in outs]
        acc = None
        # ordered reduction in dilation order
        for i, o in enumerate(outs):
            term = o * w[i]
            acc = term if acc is None else acc + term
        return acc if self.config.fuse_after_activation else T.relu(acc)


class Conv(Module):
    """Plain convolution with optional ReLU, the layer that ``replace_convs`` swaps out."""

    def __init__(self, kernel: np.ndarray, bias: np.ndarray, activation: bool = True):
        self.kernel = parameter(kernel)
        self.bias = parameter(bias)
        self.activation = activation

    @classmethod
    def init(cls, cin: int, cout: int, k: int, rng: np.random.Generator, activation: bool = True) -> Conv:
        std = np.sqrt(2.0 / (cin * k * k))
        return cls(rng.normal(0.0, std, size=(cout, cin, k, k)), np.zeros(cout), activation)

    def forward(self, x: Tensor) -> Tensor:
        k = self.kernel.shape[-1]
        out = T.conv2d(x, self.kernel, self.bias, padding=(k - 1) // 2)
        return T.relu(out) if self.activation else out


def replace_convs(network, config: MSConvConfig | None = None):
    """Copy of ``network`` with every activated k>1 ``Conv`` in ``network.layers``
    swapped for a ``MultiScaleConv`` carrying the same kernel and uniform logits."""
    import copy

    config = config or MSConvConfig()
    new = copy.deepcopy(network)
    for i, layer in enumerate(new.layers):
        if isinstance(layer, Conv) and layer.kernel.shape[-1] > 1 and layer.activation:
            new.layers[i] = MultiScaleConv(layer.kernel.data.copy(), layer.bias.data.copy(), config)
    if hasattr(new, "on_replaced"):
        new.on_replaced(config)
    return new


def msconv_forward(layer: MultiScaleConv, x: Tensor) -> Tensor:
    return layer(x)


def _round_preserving_sum(values: np.ndarray, decimals: int) -> list[int]:
    """Largest-remainder rounding to integer units of 10**-decimals; units sum to 10**decimals."""
    unit = 10 ** decimals
    scaled = np.asarray(values, dtype=np.float64) * unit / values.sum()
    floors = np.floor(scaled).astype(int)
    short = unit - floors.sum()
    order = np.argsort(-(scaled - floors), kind="stable")
    floors[order[:short]] += 1
    return floors.tolist()


def weight_report(layers: Sequence[MultiScaleConv], names: Sequence[str] | None = None,
                  decimals: int = 2) -> str:
    """Text table of mixture weights, one row per layer, one column per dilation.

    Entries are rounded so that every printed row sums to exactly one.
    """
    if not layers:
        return ""
    dilations = layers[0].dilations
    names = list(names) if names is not None else [f"Conv{i + 1}" for i in range(len(layers))]
    width = max(len("Layer"), *(len(n) for n in names))
    cw = max(5, decimals + 3)
    header = "Layer".ljust(width) + " | " + " ".join(f"{d:>{cw}d}" for d in dilations)
    rule = "-" * len(header)
    lines = [header, rule]
    for name, layer in zip(names, layers):
        if layer.dilations != dilations:
            raise ValueError("all layers in a report must share the dilation set")
        units = _round_preserving_sum(layer.mixture_weights(), decimals)
        row = " ".join(f"{u // 10 ** decimals}.{u % 10 ** decimals:0{decimals}d}".rjust(cw) for u in units)
        lines.append(name.ljust(width) + " | " + row)
    return "\n".join(lines)


def weight_rows(layers: Sequence[MultiScaleConv]) -> np.ndarray:
    return np.stack([layer.mixture_weights() for layer in layers])


def parse_weight_report(text: str) -> tuple[list[int], dict[str, list[float]]]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not set(ln.strip()) <= {"-"}]
    dilations = [int(v) for v in lines[0].split("|")[1].split()]
    rows = {}
    for ln in lines[1:]:
        name, vals = ln.split("|")
        rows[name.strip()] = [float(v) for v in vals.split()]
    return dilations, rows
