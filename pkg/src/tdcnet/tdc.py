"""Time-distributed CNN encoder producing the per-week hidden representation."""
from __future__ import annotations

import torch
import torch.nn as nn

from .layers import DEFAULT_LEAKY_SLOPE, leaky_relu, time_distributed
from .preprocess import MONTH_TABLE, N_MONTH_FEATURES

TDC_FILTERS = (8, 16, 16, 16)
TDC_KERNEL = 2
N_CONV_LAYERS = len(TDC_FILTERS)


def tdc_parameter_count(filters=TDC_FILTERS, in_channels: int = 3, kernel: int = TDC_KERNEL) -> int:
    total, cin = 0, in_channels
    for cout in filters:
        total += kernel * kernel * cin * cout + cout
        cin = cout
    return total


class FrameCNN(nn.Module):
    """Valid 2x2 convolutions with leaky-ReLU, then a global spatial max."""

    def __init__(self, in_channels=3, filters=TDC_FILTERS, slope=DEFAULT_LEAKY_SLOPE):
        super().__init__()
        self.slope = slope
        chans = (in_channels,) + tuple(filters)
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, TDC_KERNEL) for cin, cout in zip(chans[:-1], chans[1:])
        )

    def forward(self, frames):
        # frames: (N, H, W, P)
        h = frames.permute(0, 3, 1, 2)
        for conv in self.convs:
            h = leaky_relu(conv(h), self.slope)
        return h.amax(dim=(2, 3))


class TDCEncoder(nn.Module):
    """Encode a ``(B, T, H, W, P)`` video into ``(B, T, n_filters + 11)``.

    Each frame's pooled CNN features are followed by the month indicator.
    """

    def __init__(self, in_channels=3, filters=TDC_FILTERS, slope=DEFAULT_LEAKY_SLOPE):
        super().__init__()
        self.cnn = FrameCNN(in_channels, filters, slope)
        self.out_features = filters[-1] + N_MONTH_FEATURES if filters else in_channels + N_MONTH_FEATURES
        self.register_buffer("month_table", torch.tensor(MONTH_TABLE), persistent=False)

    def forward(self, video, months):
        h, w = video.shape[2:4]
        need = len(self.cnn.convs) * (TDC_KERNEL - 1) + 1
        if h < need or w < need:
            raise ValueError(f"frames of {h}x{w} too small for {len(self.cnn.convs)} valid 2x2 convolutions")
        feats = time_distributed(video, self.cnn)
        ohe = self.month_table.to(feats.dtype)[months]
        return torch.cat([feats, ohe], dim=-1)


def tdc_encode(video, months, encoder: TDCEncoder):
    """Functional entry point; accepts one unbatched ``(T, H, W, P)`` window too."""
    video = torch.as_tensor(video)
    months = torch.as_tensor(months)
    if video.ndim == 4:
        return encoder(video[None], months[None])[0]
    return encoder(video, months)
