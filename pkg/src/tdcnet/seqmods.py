"""Sequential heads (LSTM and unpadded WaveNet) and full model assembly."""
from __future__ import annotations

import io
import json
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .layers import (
    DEFAULT_LEAKY_SLOPE,
    ChannelDistributed,
    PointwiseConv1d,
    SpatialDropout1d,
    UnpaddedDilatedConv1d,
    avg_pool_align,
    conv_output_length,
    gated_activation,
    leaky_relu,
    receptive_field,
)
from .tdc import TDC_FILTERS, TDCEncoder

TDC_LSTM = "tdc-lstm"
TDC_UNPWAVENET = "tdc-unpwavenet"
MODEL_KINDS = (TDC_LSTM, TDC_UNPWAVENET)
EXPECTED_TOTALS = {TDC_LSTM: 9705, TDC_UNPWAVENET: 17915}


class ParameterCountError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    kind: str = TDC_LSTM
    T: int = 104
    in_channels: int = 3
    frame_size: int = 8
    tdc_filters: tuple = TDC_FILTERS
    bottleneck: int = 16
    dropout: float = 0.15
    slope: float = DEFAULT_LEAKY_SLOPE
    lstm_units: int = 32
    dense_units: int = 8
    unp_layers: int = 5
    unp_kernel: int = 4
    unp_filters: int = 32
    unp_channels: int = 8

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {MODEL_KINDS}")
        self.tdc_filters = tuple(self.tdc_filters)

    def to_dict(self):
        d = asdict(self)
        d["tdc_filters"] = list(self.tdc_filters)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class LeakyLSTM(nn.Module):
    """Single LSTM layer; sigmoid gates, leaky-ReLU for candidate and output.

    Gate order in the stacked weights is (input, forget, candidate, output)
    with one bias vector, so the count is ``4*(units*(in+units) + units)``.
    """

    def __init__(self, in_features, units, slope=DEFAULT_LEAKY_SLOPE):
        super().__init__()
        self.units = units
        self.slope = slope
        self.weight_ih = nn.Parameter(torch.zeros(4 * units, in_features))
        self.weight_hh = nn.Parameter(torch.zeros(4 * units, units))
        self.bias = nn.Parameter(torch.zeros(4 * units))

    def forward(self, x):
        b, steps, _ = x.shape
        n = self.units
        xw = x @ self.weight_ih.T + self.bias
        h = x.new_zeros(b, n)
        c = x.new_zeros(b, n)
        for t in range(steps):
            z = xw[:, t] + h @ self.weight_hh.T
            i = torch.sigmoid(z[:, :n])
            f = torch.sigmoid(z[:, n : 2 * n])
            g = leaky_relu(z[:, 2 * n : 3 * n], self.slope)
            o = torch.sigmoid(z[:, 3 * n :])
            c = f * c + i * g
            h = o * leaky_relu(c, self.slope)
        return h


class LSTMHead(nn.Module):
    def __init__(self, cfg: ModelConfig, in_features: int):
        super().__init__()
        self.slope = cfg.slope
        self.bottleneck = nn.Linear(in_features, cfg.bottleneck)
        self.dropout = SpatialDropout1d(cfg.dropout)
        self.lstm = LeakyLSTM(cfg.bottleneck, cfg.lstm_units, cfg.slope)
        self.dense = nn.Linear(cfg.lstm_units, cfg.dense_units)
        self.output = nn.Linear(cfg.dense_units, 1)

    def forward(self, h):
        x = leaky_relu(self.bottleneck(h), self.slope)
        x = self.dropout(x)
        x = self.lstm(x)
        x = leaky_relu(self.dense(x), self.slope)
        return self.output(x).squeeze(-1)

    def blocks(self):
        return OrderedDict(
            bottleneck=self.bottleneck, lstm=self.lstm, dense=self.dense, output=self.output
        )


class UnPWaveNetLayer(nn.Module):
    """Gated unpadded dilated convolution followed by a 1x1 convolution.

    The 1x1 output feeds both the skip path and the residual stream; the
    residual input is average-pooled to the shortened length, and projected
    when its width differs from the 1x1 output.
    """

    def __init__(self, in_channels, filters, out_channels, kernel_size, dilation):
        super().__init__()
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.conv_filter = UnpaddedDilatedConv1d(in_channels, filters, kernel_size, dilation)
        self.conv_gate = UnpaddedDilatedConv1d(in_channels, filters, kernel_size, dilation)
        self.pointwise = PointwiseConv1d(filters, out_channels)
        self.residual_proj = PointwiseConv1d(in_channels, out_channels) if in_channels != out_channels else None

    def forward(self, x):
        s = self.pointwise(gated_activation(self.conv_filter(x), self.conv_gate(x)))
        res = avg_pool_align(x, self.dilation, self.kernel_size)
        if self.residual_proj is not None:
            res = self.residual_proj(res)
        return res + s, s


class UnPWaveNetHead(nn.Module):
    def __init__(self, cfg: ModelConfig, in_features: int):
        super().__init__()
        rf = receptive_field(cfg.unp_kernel, cfg.unp_layers)
        if cfg.T < rf:
            raise ValueError(f"input length {cfg.T} shorter than the receptive field {rf}")
        self.slope = cfg.slope
        self.bottleneck = PointwiseConv1d(in_features, cfg.bottleneck)
        self.dropout = SpatialDropout1d(cfg.dropout)
        layers, cells = [], []
        length, width = cfg.T, cfg.bottleneck
        self.lengths = []
        for l in range(1, cfg.unp_layers + 1):
            d = 2 ** (l - 1)
            layers.append(UnPWaveNetLayer(width, cfg.unp_filters, cfg.unp_channels, cfg.unp_kernel, d))
            length = conv_output_length(length, cfg.unp_kernel, d)
            width = cfg.unp_channels
            self.lengths.append(length)
            cells.append(ChannelDistributed(length, 1))
        self.layers = nn.ModuleList(layers)
        self.skip_cells = nn.ModuleList(cells)
        self.skip_conv = PointwiseConv1d(cfg.unp_layers * cfg.unp_channels, cfg.dense_units)
        self.output = nn.Linear(cfg.dense_units, 1)

    def forward(self, h, return_lengths=False):
        x = leaky_relu(self.bottleneck(h), self.slope)
        x = self.dropout(x)
        skips, lengths = [], []
        for layer, cell in zip(self.layers, self.skip_cells):
            x, s = layer(x)
            lengths.append(x.shape[1])
            skips.append(cell(s))  # (B, 1, C)
        z = torch.cat(skips, dim=-1)
        z = leaky_relu(self.skip_conv(z), self.slope)[:, 0, :]
        out = self.output(z).squeeze(-1)
        return (out, lengths) if return_lengths else out

    def blocks(self):
        return OrderedDict(
            bottleneck=self.bottleneck,
            unp_layer_1=self.layers[0],
            unp_layers_rest=self.layers[1:],
            cd_skips=self.skip_cells,
            skip_conv=self.skip_conv,
            output=self.output,
        )


class TDCModel(nn.Module):
    """TDC encoder followed by a sequential head; outputs one normalized depth per sample."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.tdc = TDCEncoder(cfg.in_channels, cfg.tdc_filters, cfg.slope)
        head_cls = LSTMHead if cfg.kind == TDC_LSTM else UnPWaveNetHead
        self.head = head_cls(cfg, self.tdc.out_features)

    def forward(self, video, months):
        return self.head(self.tdc(video, months))

    def blocks(self):
        return OrderedDict([("tdc", self.tdc)] + list(self.head.blocks().items()))

    @property
    def dropouts(self):
        return [m for m in self.modules() if isinstance(m, SpatialDropout1d)]


def _n_params(module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def count_parameters(model: nn.Module | None, breakdown: bool = False):
    """Total trainable scalars, or an ordered per-block breakdown."""
    if model is None:
        return OrderedDict() if breakdown else 0
    if breakdown:
        if not hasattr(model, "blocks"):
            return OrderedDict(total=_n_params(model))
        return OrderedDict((name, _n_params(m)) for name, m in model.blocks().items())
    return _n_params(model)


def lstm_head_forward(h, head: LSTMHead):
    h = torch.as_tensor(h)
    return head(h[None])[0] if h.ndim == 2 else head(h)


def unpwavenet_head_forward(h, head: UnPWaveNetHead):
    h = torch.as_tensor(h)
    return head(h[None])[0] if h.ndim == 2 else head(h)


def build_model(kind: str = TDC_LSTM, config: ModelConfig | dict | None = None, seed: int | None = 0,
                check_count: bool = True, dtype=torch.float64) -> TDCModel:
    """Assemble a model; the default configurations must hit the published totals.

    ``check_count=False`` disables the parameter-count tripwire for
    modified architectures.
    """
    if isinstance(config, dict):
        config = ModelConfig(**{**config, "kind": kind})
    cfg = config or ModelConfig(kind=kind)
    if cfg.kind != kind:
        cfg = ModelConfig(**{**cfg.to_dict(), "kind": kind})
    model = TDCModel(cfg).to(dtype)
    if seed is not None:
        from .training import init_parameters

        init_parameters(model, seed)
    if check_count:
        n = count_parameters(model)
        if n != EXPECTED_TOTALS[kind]:
            raise ParameterCountError(
                f"{kind} has {n} parameters, expected {EXPECTED_TOTALS[kind]}: "
                f"{dict(count_parameters(model, breakdown=True))}"
            )
    return model


CHECKPOINT_VERSION = 1


def save_checkpoint(model: TDCModel, path, extra: dict | None = None) -> None:
    """Write parameters and the model config to one ``.npz`` container.

    Arrays are keyed by parameter name; ``__meta__`` holds a JSON document
    with the format version, config, dtype and any ``extra`` fields.
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "n_parameters": count_parameters(model),
        **(extra or {}),
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    arrays.update((name, p.detach().cpu().numpy()) for name, p in model.named_parameters())
    # np.savez stamps entries with the wall clock; a fixed stamp keeps reruns byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path) -> tuple[TDCModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig.from_dict(meta["config"])
        model = build_model(cfg.kind, cfg, seed=None, check_count=False, dtype=getattr(torch, meta["dtype"]))
        state = dict(model.named_parameters())
        missing = set(state) - set(z.files)
        if missing:
            raise ValueError(f"{path}: missing parameters {sorted(missing)}")
        with torch.no_grad():
            for name, p in state.items():
                p.copy_(torch.from_numpy(z[name]))
    model.eval()
    return model, meta
