"""ConvLSTM encoder-decoder over two resolutions.

Layout (channels ``(c1, c2)``, default ``(8, 16)``)::

    x_t --conv1(tanh)--> f1 (c1, M, N) --avgpool2--conv2(tanh)--> f2 (c2, M/2, N/2)
    encoder:  f1 -> ConvLSTM enc_full,  f2 -> ConvLSTM enc_half   (over the alpha inputs)
    decoder:  states handed to dec_full / dec_half, driven by the features of the
              previous output frame (the last input for the first step)
    merge:    m = tanh(conv([h_full, up2(h_half)]))
    output:   y_j = y_{j-1} + conv_out(m + h_full)

Dropout keeps or drops whole channels of a layer output, i.e. the weight group
that the next layer attaches to that channel.  A mask is fixed for the whole
pass and never touches the recurrent path.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MASKED_LAYERS = ("conv1", "conv2", "dec_full", "dec_half", "merge")


class ShapeError(ValueError):
    pass


def _conv(cin, cout, k, bias=True):
    return nn.Conv2d(cin, cout, k, padding=k // 2, padding_mode="replicate", bias=bias)


def _uniform_(t: torch.Tensor, fan_in: int):
    bound = math.sqrt(1.0 / fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound)


class ConvLstmCell(nn.Module):
    """Peephole ConvLSTM cell.

    Gates are stacked in the order i, f, c, o along the output channels of
    ``conv_x`` (input kernels plus biases) and ``conv_h`` (hidden kernels).
    Peepholes are elementwise weights with the cell-state shape.
    """

    def __init__(self, in_channels: int, hidden_channels: int, shape: tuple[int, int], kernel: int = 3):
        super().__init__()
        if kernel < 1 or kernel % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kernel}")
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.shape = tuple(shape)
        self.kernel = kernel
        self.conv_x = _conv(in_channels, 4 * hidden_channels, kernel, bias=True)
        self.conv_h = _conv(hidden_channels, 4 * hidden_channels, kernel, bias=False)
        self.w_ci = nn.Parameter(torch.empty(hidden_channels, *self.shape))
        self.w_cf = nn.Parameter(torch.empty(hidden_channels, *self.shape))
        self.w_co = nn.Parameter(torch.empty(hidden_channels, *self.shape))
        self.reset_parameters()

    def reset_parameters(self):
        k2 = self.kernel * self.kernel
        _uniform_(self.conv_x.weight, self.in_channels * k2)
        _uniform_(self.conv_x.bias, self.in_channels * k2)
        _uniform_(self.conv_h.weight, self.hidden_channels * k2)
        for w in (self.w_ci, self.w_cf, self.w_co):
            _uniform_(w, 1)
        hc = self.hidden_channels
        with torch.no_grad():
            self.conv_x.bias[hc:2 * hc].fill_(1.0)

    def zero_state(self, batch: int, like: torch.Tensor):
        z = like.new_zeros(batch, self.hidden_channels, *self.shape)
        return z, z.clone()

    def forward(self, x, h_prev, c_prev, return_gates: bool = False):
        return convlstm_step(self, x, h_prev, c_prev, return_gates=return_gates)


def convlstm_step(cell: ConvLstmCell, x, h_prev, c_prev, return_gates: bool = False):
    if x.dim() != 4 or x.shape[1] != cell.in_channels or tuple(x.shape[2:]) != cell.shape:
        raise ShapeError(f"input shape {tuple(x.shape)} does not match cell "
                         f"({cell.in_channels}, {cell.shape})")
    expected = (x.shape[0], cell.hidden_channels, *cell.shape)
    if tuple(h_prev.shape) != expected or tuple(c_prev.shape) != expected:
        raise ShapeError(f"state shapes {tuple(h_prev.shape)}, {tuple(c_prev.shape)} != {expected}")
    zx_i, zx_f, zx_c, zx_o = cell.conv_x(x).chunk(4, dim=1)
    zh_i, zh_f, zh_c, zh_o = cell.conv_h(h_prev).chunk(4, dim=1)
    i = torch.sigmoid(zx_i + zh_i + cell.w_ci * c_prev)
    f = torch.sigmoid(zx_f + zh_f + cell.w_cf * c_prev)
    d = i * torch.tanh(zx_c + zh_c)
    c = f * c_prev + d
    o = torch.sigmoid(zx_o + zh_o + cell.w_co * c)
    h = o * torch.tanh(c)
    if return_gates:
        return h, c, {"i": i, "f": f, "o": o, "d": d}
    return h, c


@dataclass(frozen=True)
class NetworkConfig:
    rows: int
    cols: int
    channels: tuple[int, int] = (8, 16)
    kernel: int = 3
    dropout: float = 0.4

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


class Network(nn.Module):
    """Two-resolution ConvLSTM encoder-decoder for fixed ``rows x cols`` maps."""

    factor = 2  # total downsampling

    def __init__(self, config: NetworkConfig):
        super().__init__()
        if config.rows % self.factor or config.cols % self.factor:
            raise ShapeError(f"map dims {config.rows}x{config.cols} not divisible by {self.factor}")
        if not 0.0 <= config.dropout < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.config = config
        c1, c2 = config.channels
        k = config.kernel
        full = (config.rows, config.cols)
        half = (config.rows // 2, config.cols // 2)
        self.conv1 = _conv(1, c1, k)
        self.conv2 = _conv(c1, c2, k)
        self.enc_full = ConvLstmCell(c1, c1, full, k)
        self.enc_half = ConvLstmCell(c2, c2, half, k)
        self.dec_full = ConvLstmCell(c1, c1, full, k)
        self.dec_half = ConvLstmCell(c2, c2, half, k)
        self.merge = _conv(c1 + c2, c1, k)
        self.out = _conv(c1, 1, k)
        for conv, cin in ((self.conv1, 1), (self.conv2, c1), (self.merge, c1 + c2), (self.out, c1)):
            _uniform_(conv.weight, cin * k * k)
            _uniform_(conv.bias, cin * k * k)
        self.stats = None  # NormStats, set by training

    def mask_channels(self) -> dict[str, int]:
        c1, c2 = self.config.channels
        return {"conv1": c1, "conv2": c2, "dec_full": c1, "dec_half": c2, "merge": c1}

    def _features(self, frame, masks):
        f1 = torch.tanh(self.conv1(frame))
        f1 = _apply(f1, masks, "conv1")
        f2 = torch.tanh(self.conv2(F.avg_pool2d(f1, 2)))
        f2 = _apply(f2, masks, "conv2")
        return f1, f2

    def forward(self, inputs, masks=None, horizon: int | None = None):
        """``inputs`` (B, alpha, M, N) -> (B, horizon, M, N); horizon defaults to alpha.

        ``masks`` maps each name in ``MASKED_LAYERS`` to a (B, C) tensor of
        channel scales, or is None for a deterministic pass.
        """
        if inputs.dim() != 4:
            raise ShapeError(f"inputs must be (B, alpha, M, N), got {tuple(inputs.shape)}")
        B, alpha, M, N = inputs.shape
        if (M, N) != (self.config.rows, self.config.cols):
            if M % self.factor or N % self.factor:
                raise ShapeError(f"map dims {M}x{N} not divisible by {self.factor}")
            raise ShapeError(f"network built for {self.config.rows}x{self.config.cols}, got {M}x{N}")
        if alpha < 1:
            raise ShapeError("need at least one input map")
        horizon = alpha if horizon is None else int(horizon)
        hf, cf = self.enc_full.zero_state(B, inputs)
        hh, ch = self.enc_half.zero_state(B, inputs)
        for t in range(alpha):
            f1, f2 = self._features(inputs[:, t:t + 1], masks)
            hf, cf = self.enc_full(f1, hf, cf)
            hh, ch = self.enc_half(f2, hh, ch)
        prev = inputs[:, alpha - 1:alpha]
        outputs = []
        for _ in range(horizon):
            f1, f2 = self._features(prev, masks)
            hf, cf = self.dec_full(f1, hf, cf)
            hh, ch = self.dec_half(f2, hh, ch)
            of = _apply(hf, masks, "dec_full")
            oh = _apply(hh, masks, "dec_half")
            up = F.interpolate(oh, scale_factor=2, mode="nearest")
            m = torch.tanh(self.merge(torch.cat([of, up], dim=1)))
            m = _apply(m, masks, "merge")
            prev = prev + self.out(m + of)
            outputs.append(prev)
        return torch.cat(outputs, dim=1)


def _apply(x, masks, name):
    if masks is None:
        return x
    return x * masks[name][:, :, None, None]


def draw_masks(net: Network, rngs, p: float, like: torch.Tensor | None = None) -> dict[str, torch.Tensor] | None:
    """One channel mask set per generator in ``rngs``; kept channels are scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if p == 0.0:
        return None
    dtype = like.dtype if like is not None else torch.get_default_dtype()
    chans = net.mask_channels()
    rows = {name: [] for name in MASKED_LAYERS}
    for rng in rngs:
        for name in MASKED_LAYERS:
            keep = rng.random(chans[name]) >= p
            rows[name].append(keep / (1.0 - p))
    return {name: torch.as_tensor(np.stack(v), dtype=dtype) for name, v in rows.items()}


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
