"""CNN encoder, the symmetric decoder, segmentation head and the full network.

Channel plan: the stem produces C1 at full resolution and encoder stage k
produces C_k at 1/2**k. The bottleneck consumes stage 4 (1/16). Decoder
steps upsample to C3, C2, C1, C1 and consume the skips of stage 3, stage 2,
stage 1 and the stem.
"""

from __future__ import annotations

import torch
from torch import nn

from .attention import SelfAttentionBottleneck, conv_norm_act
from .config import ModelConfig


class ShapeError(ValueError):
    """Tensor shape incompatible with the network."""


def _check_channels(x: torch.Tensor, expected: int, where: str) -> None:
    if x.dim() != 5:
        raise ShapeError(f"{where}: expected a 5D tensor (B, C, X, Y, Z), got {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeError(f"{where}: expected {expected} input channels, got {x.shape[1]}")


class Stem(nn.Module):
    """7x7x7 stride-1 convolution to C1 channels."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv = conv_norm_act(in_channels, out_channels, kernel=7)

    def forward(self, x):
        _check_channels(x, self.in_channels, "stem")
        return self.conv(x)


class ResidualUnit(nn.Module):
    """Two 3x3x3 conv blocks with an identity shortcut."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv_norm_act(channels, channels)
        self.conv2 = conv_norm_act(channels, channels)

    def forward(self, x):
        return x + self.conv2(self.conv1(x))


class EncoderStage(nn.Module):
    """Stride-2 conv, stride-1 conv, then ``depth`` residual units."""

    def __init__(self, in_channels: int, out_channels: int, depth: int):
        super().__init__()
        self.in_channels = in_channels
        self.down = nn.Sequential(
            conv_norm_act(in_channels, out_channels, stride=2),
            conv_norm_act(out_channels, out_channels),
        )
        self.units = nn.Sequential(*[ResidualUnit(out_channels) for _ in range(depth)])

    def forward(self, f):
        _check_channels(f, self.in_channels, "encoder stage")
        pads = [0, 0] * 3
        for axis, size in enumerate(reversed(f.shape[2:])):
            pads[2 * axis + 1] = size % 2
        if any(pads):
            f = nn.functional.pad(f, pads)
        return self.units(self.down(f))


class UpConv3d(nn.ConvTranspose3d):
    """Kernel-2 stride-2 transposed conv.

    Outside autograd, large inputs are computed as eight strided 1x1x1
    products, which avoids the backend's column buffer (about twice the
    output size). Results match up to float rounding.
    """

    direct_threshold = 2 ** 17  # input voxels

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(in_channels, out_channels, kernel_size=2, stride=2)

    def forward(self, x, output_size=None):
        if torch.is_grad_enabled() or x.dim() != 5 or x.shape[2:].numel() <= self.direct_threshold:
            return super().forward(x, output_size)
        b, _, n1, n2, n3 = x.shape
        out = x.new_empty((b, self.out_channels, 2 * n1, 2 * n2, 2 * n3))
        bias = self.bias.view(1, -1, 1, 1, 1) if self.bias is not None else 0
        for i in (0, 1):
            for j in (0, 1):
                for k in (0, 1):
                    w = self.weight[:, :, i, j, k].t()[..., None, None, None]
                    out[:, :, i::2, j::2, k::2] = nn.functional.conv3d(x, w) + bias
        return out


class DecoderStage(nn.Module):
    """Upsample x2, concatenate the skip, two 3x3x3 convs, add the upsampled input."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.skip_channels = skip_channels
        self.up = UpConv3d(in_channels, out_channels)
        self.conv1 = conv_norm_act(out_channels + skip_channels, out_channels)
        self.conv2 = conv_norm_act(out_channels, out_channels)

    def forward(self, up_in, skip):
        _check_channels(up_in, self.in_channels, "decoder input")
        _check_channels(skip, self.skip_channels, "decoder skip")
        up = self.up(up_in)
        if up.shape[2:] != skip.shape[2:]:
            raise ShapeError(
                f"upsampled input {tuple(up.shape[2:])} does not match skip {tuple(skip.shape[2:])}"
            )
        # rebinding one name releases the skip and the concatenation as early
        # as possible, which matters at full resolution
        x = torch.cat([up, skip], dim=1)
        del skip
        x = self.conv1(x)
        x = self.conv2(x)
        return up + x


class SegmentationHead(nn.Module):
    """1x1x1 convolution to class logits."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv3d(in_channels, num_classes, kernel_size=1)

    def forward(self, f):
        _check_channels(f, self.in_channels, "segmentation head")
        return self.conv(f)


class CISUNet(nn.Module):
    """Convolutional encoder-decoder with a shifted-window attention bottleneck."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.stage_channels
        self.stem = Stem(cfg.in_channels, c1)
        ins = (c1, c1, c2, c3)
        self.encoder = nn.ModuleList(
            EncoderStage(i, o, d) for i, o, d in zip(ins, cfg.stage_channels, cfg.stage_depths)
        )
        self.bottleneck = SelfAttentionBottleneck.from_config(cfg)
        dec_out = (c3, c2, c1, c1)
        dec_in = (cfg.embed_dim, c3, c2, c1)
        skips = (c3, c2, c1, c1)
        self.decoder = nn.ModuleList(
            DecoderStage(i, s, o) for i, s, o in zip(dec_in, skips, dec_out)
        )
        self.head = SegmentationHead(c1, cfg.num_classes)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu",
                                        mode="fan_in" if isinstance(m, nn.Conv3d) else "fan_out")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, (nn.GroupNorm, nn.LayerNorm)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return the stem output and the four stage outputs."""
        stem_out = self.stem(x)
        outs = []
        f = stem_out
        for stage in self.encoder:
            f = stage(f)
            outs.append(f)
        return stem_out, outs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5:
            raise ShapeError(f"expected (B, C, X, Y, Z), got {tuple(x.shape)}")
        bad = [s for s in x.shape[2:] if s % 16]
        if bad:
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by 16")
        stem_out, stages = self.encode(x)
        f = self.bottleneck(stages[3])
        skips = [stages[2], stages[1], stages[0], stem_out]
        del stem_out, stages
        for dec in self.decoder:
            f = dec(f, skips.pop(0))
        return self.head(f)


def parameter_breakdown(model: nn.Module) -> dict[str, int]:
    """Trainable scalar count per top-level submodule."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        if p.requires_grad:
            key = name.split(".")[0]
            if key in ("encoder", "decoder"):
                key = ".".join(name.split(".")[:2])
            out[key] = out.get(key, 0) + p.numel()
    return out


def count_parameters(cfg_or_model: ModelConfig | nn.Module) -> int:
    """Exact number of trainable scalars of the network built from ``cfg``."""
    if isinstance(cfg_or_model, nn.Module):
        model = cfg_or_model
    else:
        # meta device: no allocation, no RNG use
        with torch.device("meta"):
            model = CISUNet(cfg_or_model)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_model(cfg: ModelConfig, seed: int | None = None) -> CISUNet:
    if seed is not None:
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            return CISUNet(cfg)
        finally:
            torch.random.set_rng_state(gen_state)
    return CISUNet(cfg)

