"""Bottleneck self-attention: one shifted-window transformer block at 1/16
resolution, optionally followed by the patch-merge context branch.

Token grids are channel-last tensors of shape ``(B, h, w, d, F)``. Windows are
cubes of ``M`` tokens per axis; flattening order inside a window and across
windows is x-major (the last spatial axis varies fastest).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import AttentionVariant, ModelConfig

MASK_VALUE = -1e9


def _pad_amounts(size: int, multiple: int) -> int:
    return (multiple - size % multiple) % multiple


def pad_grid(z: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int, int]]:
    """Zero-pad the spatial axes of a token grid up to a multiple; returns the pads."""
    pads = tuple(_pad_amounts(s, multiple) for s in z.shape[1:4])
    if any(pads):
        z = F.pad(z, (0, 0, 0, pads[2], 0, pads[1], 0, pads[0]))
    return z, pads


def window_partition(z: torch.Tensor, window_size: int) -> torch.Tensor:
    """Split ``(B, h, w, d, C)`` into ``(B * nW, M**3, C)``.

    Spatial dims must already be multiples of ``window_size`` (see
    :func:`pad_grid`).
    """
    b, h, w, d, c = z.shape
    m = window_size
    if h % m or w % m or d % m:
        raise ValueError(f"grid {(h, w, d)} is not divisible by window size {m}; pad first")
    x = z.view(b, h // m, m, w // m, m, d // m, m, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(-1, m * m * m, c)


def window_reverse(windows: torch.Tensor, grid_shape: tuple[int, int, int, int],
                   window_size: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`; ``grid_shape`` is ``(B, h, w, d)``."""
    b, h, w, d = grid_shape
    m = window_size
    if h % m or w % m or d % m:
        raise ValueError(f"grid {(h, w, d)} is not divisible by window size {m}")
    n_windows = b * (h // m) * (w // m) * (d // m)
    if windows.dim() != 3 or windows.shape[0] != n_windows or windows.shape[1] != m ** 3:
        raise ValueError(
            f"windows of shape {tuple(windows.shape)} do not match grid {grid_shape} "
            f"with window size {m}"
        )
    c = windows.shape[-1]
    x = windows.view(b, h // m, w // m, d // m, m, m, m, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(b, h, w, d, c)


def cyclic_shift(z: torch.Tensor, shift: int) -> torch.Tensor:
    """Roll a token grid by ``-shift`` along every spatial axis."""
    if shift == 0:
        return z
    return torch.roll(z, shifts=(-shift, -shift, -shift), dims=(1, 2, 3))


def inverse_shift(z: torch.Tensor, shift: int) -> torch.Tensor:
    if shift == 0:
        return z
    return torch.roll(z, shifts=(shift, shift, shift), dims=(1, 2, 3))


def region_ids(h: int, w: int, d: int, window_size: int, shift: int) -> torch.Tensor:
    """Region label of every token of a shifted grid (three bands per axis)."""
    img = torch.zeros(1, h, w, d, 1)
    if shift == 0:
        return img
    bands = (slice(0, -window_size), slice(-window_size, -shift), slice(-shift, None))
    count = 0
    for sh in bands:
        for sw in bands:
            for sd in bands:
                img[:, sh, sw, sd, :] = count
                count += 1
    return img


def build_shift_mask(h: int, w: int, d: int, window_size: int, shift: int) -> torch.Tensor:
    """Additive mask ``(nW, M**3, M**3)`` blocking pairs from different regions.

    ``h, w, d`` are the (padded) grid dims, multiples of ``window_size``.
    """
    if not 0 <= shift < window_size:
        raise ValueError(f"need 0 <= shift < window_size, got {shift} and {window_size}")
    ids = window_partition(region_ids(h, w, d, window_size, shift), window_size).squeeze(-1)
    diff = ids.unsqueeze(1) - ids.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, MASK_VALUE)


def relative_position_index(window_size: int) -> torch.Tensor:
    """Map each token pair of a window to a row of the ``(2M-1)**3`` bias table."""
    m = window_size
    coords = torch.stack(torch.meshgrid(torch.arange(m), torch.arange(m), torch.arange(m),
                                        indexing="ij"))
    coords = coords.flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0) + (m - 1)
    return rel[..., 0] * (2 * m - 1) ** 2 + rel[..., 1] * (2 * m - 1) + rel[..., 2]


class WindowAttention(nn.Module):
    """Multi-head self-attention inside windows with a learned relative position bias."""

    def __init__(self, dim: int, num_heads: int, window_size: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"token width {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 3, num_heads)
        )
        self.register_buffer("relative_position_index", relative_position_index(window_size),
                             persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attention: torch.Tensor | None = None
        self.keep_attention = False

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``x``: ``(B*nW, N, C)``; ``mask``: ``(nW, N, N)`` additive, or None."""
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q * self.scale) @ k.transpose(-2, -1)

        bias = self.relative_position_bias_table[self.relative_position_index[:n, :n].reshape(-1)]
        attn = attn + bias.reshape(n, n, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            n_w = mask.shape[0]
            attn = attn.view(bw // n_w, n_w, self.num_heads, n, n) + mask[None, :, None].to(attn)
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        if self.keep_attention:
            self.last_attention = attn.detach()

        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


@dataclass
class BottleneckActivations:
    """Intermediates of one transformer block: z, z_hat, z_prime, z_bar, z_out."""

    z: torch.Tensor
    z_hat: torch.Tensor
    z_prime: torch.Tensor
    z_bar: torch.Tensor
    z_out: torch.Tensor


class SwinBlock(nn.Module):
    """Window attention and shifted-window attention, each followed by an MLP.

    Every sub-layer is pre-normalized and wrapped in a residual connection.
    Padded tokens are excluded as attention keys.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int, shift_size: int,
                 mlp_ratio: float = 4.0):
        super().__init__()
        self.window_size = window_size
        self.shift_size = shift_size
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp1 = Mlp(dim, hidden)
        self.norm3 = nn.LayerNorm(dim)
        self.attn2 = WindowAttention(dim, num_heads, window_size)
        self.norm4 = nn.LayerNorm(dim)
        self.mlp2 = Mlp(dim, hidden)

    def _attend(self, attn: WindowAttention, x: torch.Tensor, shift: int) -> torch.Tensor:
        b, h, w, d, c = x.shape
        m = self.window_size
        x, pads = pad_grid(x, m)
        hp, wp, dp = x.shape[1:4]

        mask = None
        if any(pads):
            valid = torch.ones(1, h, w, d, 1, dtype=x.dtype, device=x.device)
            valid, _ = pad_grid(valid, m)
            valid = window_partition(cyclic_shift(valid, shift), m).squeeze(-1)
            mask = torch.zeros_like(valid).masked_fill(valid == 0, MASK_VALUE)
            mask = mask.unsqueeze(1).expand(-1, m ** 3, -1)
        if shift:
            shift_mask = build_shift_mask(hp, wp, dp, m, shift).to(x)
            mask = shift_mask if mask is None else mask + shift_mask

        windows = window_partition(cyclic_shift(x, shift), m)
        windows = attn(windows, mask)
        x = inverse_shift(window_reverse(windows, (b, hp, wp, dp), m), shift)
        return x[:, :h, :w, :d].contiguous()

    def forward(self, z: torch.Tensor, return_activations: bool = False):
        z_hat = self._attend(self.attn1, self.norm1(z), 0) + z
        z_prime = self.mlp1(self.norm2(z_hat)) + z_hat
        z_bar = self._attend(self.attn2, self.norm3(z_prime), self.shift_size) + z_prime
        z_out = self.mlp2(self.norm4(z_bar)) + z_bar
        if return_activations:
            return z_out, BottleneckActivations(z, z_hat, z_prime, z_bar, z_out)
        return z_out


class LinearEmbed(nn.Module):
    """Per-voxel affine projection from encoder channels to token width."""

    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.in_channels = in_channels
        self.proj = nn.Linear(in_channels, dim)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {f.shape[1]}")
        return self.proj(f.permute(0, 2, 3, 4, 1))


# neighbor offsets in concatenation order, last axis fastest
MERGE_OFFSETS = tuple((i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1))


class PatchMerging(nn.Module):
    """Concatenate each 2x2x2 token neighborhood (8C), layer-norm, project to 2C.

    Odd grids are zero-padded to even size first.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z, _ = pad_grid(z, 2)
        parts = [z[:, i::2, j::2, k::2, :] for i, j, k in MERGE_OFFSETS]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


class ContextUpsample(nn.Module):
    """Transposed conv (kernel 2, stride 2) from 2F back to F channels."""

    def __init__(self, dim: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(2 * dim, dim, kernel_size=2, stride=2)

    def forward(self, m: torch.Tensor, out_size: tuple[int, int, int] | None = None) -> torch.Tensor:
        x = self.up(m.permute(0, 4, 1, 2, 3)).permute(0, 2, 3, 4, 1)
        if out_size is not None:
            x = x[:, : out_size[0], : out_size[1], : out_size[2]]
        return x.contiguous()


class InstanceNorm(nn.GroupNorm):
    """Affine instance norm (one group per channel).

    Unlike the stock modules it accepts single-voxel maps at batch size 1,
    which the 1/16 stage produces for 16^3 inputs; those normalize to the bias.
    """

    def __init__(self, channels: int):
        super().__init__(channels, channels)

    def forward(self, x):
        return torch.group_norm(x, self.num_groups, self.weight, self.bias, self.eps)


class SlabConv3d(nn.Conv3d):
    """Conv3d that runs large volumes slab by slab along the first spatial axis.

    Only used outside autograd with stride 1, where it bounds the backend's
    workspace (a full copy of the input) at full resolution. Results match
    the plain convolution up to float rounding.
    """

    slab_threshold = 2 ** 20  # voxels
    slab_voxels = 2 ** 17

    def forward(self, x):
        if (torch.is_grad_enabled() or self.stride != (1, 1, 1) or x.dim() != 5
                or x.shape[2:].numel() <= self.slab_threshold):
            return super().forward(x)
        k, p = self.kernel_size[0], self.padding[0]
        n = x.shape[2]
        rows = max(1, self.slab_voxels // (x.shape[3] * x.shape[4]))
        out = None
        for a in range(0, n, rows):
            b = min(a + rows, n)
            lo, hi = a - p, b + k - 1 - p
            slab = x[:, :, max(lo, 0):min(hi, n)]
            slab = F.pad(slab, (0, 0, 0, 0, max(-lo, 0), max(hi - n, 0)))
            y = F.conv3d(slab, self.weight, self.bias, 1, (0, *self.padding[1:]))
            if out is None:
                out = y.new_empty((y.shape[0], y.shape[1], n, *y.shape[3:]))
            out[:, :, a:b] = y
        return out


def conv_norm_act(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1) -> nn.Sequential:
    """Conv without bias, instance norm, ReLU."""
    return nn.Sequential(
        SlabConv3d(in_ch, out_ch, kernel, stride=stride, padding=(kernel - 1) // 2, bias=False),
        InstanceNorm(out_ch),
        nn.ReLU(inplace=True),
    )


class SelfAttentionBottleneck(nn.Module):
    """Embed encoder features, run one transformer block, refine back to F channels.

    With ``context=True`` (CSW-SA) the block output is patch-merged to half
    resolution, upsampled back, and concatenated with the embedded tokens
    before refinement. With ``context=False`` (plain SW-SA) the block output
    is refined directly.
    """

    def __init__(self, in_channels: int, dim: int, num_heads: int, window_size: int,
                 shift_size: int, mlp_ratio: float = 4.0, context: bool = True):
        super().__init__()
        self.context = context
        self.embed = LinearEmbed(in_channels, dim)
        self.block = SwinBlock(dim, num_heads, window_size, shift_size, mlp_ratio)
        if context:
            self.merge = PatchMerging(dim)
            self.upsample = ContextUpsample(dim)
        self.refine = nn.Sequential(
            conv_norm_act(2 * dim if context else dim, dim),
            conv_norm_act(dim, dim),
        )

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "SelfAttentionBottleneck":
        return cls(cfg.stage_channels[3], cfg.embed_dim, cfg.num_heads, cfg.window_size,
                   cfg.shift_size, cfg.mlp_ratio,
                   context=cfg.attention_variant == AttentionVariant.CSW_SA)

    def forward(self, f_enc: torch.Tensor) -> torch.Tensor:
        z = self.embed(f_enc)
        z_out = self.block(z)
        if self.context:
            g = self.upsample(self.merge(z_out), out_size=tuple(z.shape[1:4]))
            fused = torch.cat([g, z], dim=-1)
        else:
            fused = z_out
        return self.refine(fused.permute(0, 4, 1, 2, 3).contiguous())

