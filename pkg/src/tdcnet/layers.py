"""Sequence layer primitives.

Sequence tensors are laid out batch-first as ``(batch, time, channel)``.
The functional forms take explicit parameters so they can be checked
against naive oracles; the ``nn.Module`` wrappers hold trainable weights.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_LEAKY_SLOPE = 0.3


def receptive_field(kernel_size: int, n_layers: int) -> int:
    """Receptive field of ``n_layers`` stacked dilated convolutions.

    Layer ``i`` (1-based) uses dilation ``2**(i-1)``.
    """
    if kernel_size < 1 or n_layers < 1:
        raise ValueError("kernel_size and n_layers must be >= 1")
    return 1 + (kernel_size - 1) * sum(2 ** (i - 1) for i in range(1, n_layers + 1))


def conv_output_length(length: int, kernel_size: int, dilation: int) -> int:
    return length - (kernel_size - 1) * dilation


def _check_length(length: int, kernel_size: int, dilation: int) -> None:
    span = (kernel_size - 1) * dilation
    if length <= span:
        raise ValueError(
            f"sequence of length {length} too short for kernel {kernel_size} "
            f"with dilation {dilation}: need at least {span + 1} steps"
        )


def unpadded_dilated_conv(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None, dilation: int
) -> torch.Tensor:
    """Valid (no padding) dilated 1D convolution.

    ``x`` is ``(B, L, Cin)``, ``weight`` is ``(Cout, Cin, K)`` and the result is
    ``(B, L - (K-1)*dilation, Cout)`` with
    ``y[t, o] = bias[o] + sum_{k,c} weight[o, c, k] * x[t + k*dilation, c]``.
    """
    _check_length(x.shape[1], weight.shape[-1], dilation)
    y = F.conv1d(x.transpose(1, 2), weight, bias, dilation=dilation)
    return y.transpose(1, 2)


def gated_activation(x_filter: torch.Tensor, x_gate: torch.Tensor) -> torch.Tensor:
    if x_filter.shape != x_gate.shape:
        raise ValueError(f"shape mismatch: {tuple(x_filter.shape)} vs {tuple(x_gate.shape)}")
    return torch.tanh(x_filter) * torch.sigmoid(x_gate)


def channel_distributed(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Apply one affine cell ``R^L -> R^L*`` to every channel's time series.

    ``x`` is ``(B, L, C)``, ``weight`` is ``(L*, L)`` and ``bias`` is ``(L*,)``.
    """
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"cell expects length {weight.shape[1]}, got {x.shape[1]}")
    return torch.einsum("blc,ml->bmc", x, weight) + bias[None, :, None]


def time_distributed(x: torch.Tensor, cell) -> torch.Tensor:
    """Apply ``cell`` to each frame of ``x`` (``(B, T, *frame)``) with shared weights."""
    b, t = x.shape[:2]
    out = cell(x.reshape(b * t, *x.shape[2:]))
    return out.reshape(b, t, *out.shape[1:])


def avg_pool_align(x: torch.Tensor, dilation: int, kernel_size: int) -> torch.Tensor:
    """Stride-1 moving average over ``(K-1)*d + 1`` steps.

    The output length matches :func:`unpadded_dilated_conv` for the same
    ``(L, K, d)``, which is what lets the residual be added.
    """
    _check_length(x.shape[1], kernel_size, dilation)
    window = (kernel_size - 1) * dilation + 1
    return F.avg_pool1d(x.transpose(1, 2), window, stride=1).transpose(1, 2)


def spatial_dropout(
    x: torch.Tensor, p: float, generator: torch.Generator | None = None, training: bool = True
) -> torch.Tensor:
    """Drop whole channels of a ``(B, L, C)`` tensor, inverted scaling."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape[0], 1, x.shape[2], generator=generator, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def leaky_relu(x: torch.Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> torch.Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must be in (0, 1), got {slope}")
    return F.leaky_relu(x, slope)


class UnpaddedDilatedConv1d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, dilation: int = 1):
        super().__init__()
        if kernel_size < 1 or dilation < 1:
            raise ValueError("kernel_size and dilation must be >= 1")
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.weight = nn.Parameter(torch.zeros(out_channels, in_channels, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x):
        return unpadded_dilated_conv(x, self.weight, self.bias, self.dilation)

    def extra_repr(self):
        cout, cin, k = self.weight.shape
        return f"{cin}, {cout}, kernel_size={k}, dilation={self.dilation}"


class PointwiseConv1d(UnpaddedDilatedConv1d):
    """1x1 convolution, i.e. a time-distributed affine map over channels."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(in_channels, out_channels, kernel_size=1)


class ChannelDistributed(nn.Module):
    """Fully connected cell shared across channels, acting on the time axis."""

    def __init__(self, in_length: int, out_length: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(out_length, in_length))
        self.bias = nn.Parameter(torch.zeros(out_length))

    def forward(self, x):
        return channel_distributed(x, self.weight, self.bias)

    def extra_repr(self):
        return f"in_length={self.weight.shape[1]}, out_length={self.weight.shape[0]}"


class SpatialDropout1d(nn.Module):
    """Channel dropout drawing from an owned generator so runs are reproducible."""

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.generator = torch.Generator()

    def forward(self, x):
        return spatial_dropout(x, self.p, self.generator, self.training)

    def extra_repr(self):
        return f"p={self.p}"
