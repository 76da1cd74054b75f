"""Whole-volume prediction with overlapping sliding windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


def window_origins(size: int, patch: int, overlap: float) -> list[int]:
    """Start offsets along one axis; the last window is shifted inward to fit."""
    if size <= patch:
        return [0]
    stride = max(int(patch * (1.0 - overlap)), 1)
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] != size - patch:
        origins.append(size - patch)
    return origins


def gaussian_importance(patch_size, sigma_scale: float = 1.0 / 8) -> np.ndarray:
    """Separable Gaussian centered on the patch, peak 1, strictly positive."""
    axes = []
    for p in patch_size:
        x = np.arange(p, dtype=np.float64) - (p - 1) / 2.0
        sigma = p * sigma_scale
        axes.append(np.exp(-0.5 * (x / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w = w / w.max()
    return np.maximum(w, 1e-3)


@dataclass
class SlidingPlan:
    volume_shape: tuple[int, int, int]
    patch_size: tuple[int, int, int]
    overlap: float
    origins: list[tuple[int, int, int]]
    weight: np.ndarray
    normalizer: np.ndarray

    def blend_weights(self) -> np.ndarray:
        """Per-window normalized weights, shape ``(n_windows, *volume_shape)``.

        Only meant for checking; they sum to one at every voxel.
        """
        out = np.zeros((len(self.origins), *self.volume_shape))
        for i, o in enumerate(self.origins):
            sl = tuple(slice(a, a + p) for a, p in zip(o, self.patch_size))
            out[(i, *sl)] = self.weight / self.normalizer[sl]
        return out


def make_plan(volume_shape, patch_size, overlap: float = 0.5, blend: str = "gaussian") -> SlidingPlan:
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    volume_shape = tuple(int(s) for s in volume_shape)
    patch_size = tuple(int(p) for p in patch_size)
    if any(v < p for v, p in zip(volume_shape, patch_size)):
        raise ValueError(f"volume {volume_shape} is smaller than patch {patch_size}; pad first")
    per_axis = [window_origins(s, p, overlap) for s, p in zip(volume_shape, patch_size)]
    origins = [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]
    if blend == "gaussian":
        weight = gaussian_importance(patch_size)
    elif blend == "uniform":
        weight = np.ones(patch_size)
    else:
        raise ValueError(f"unknown blend mode {blend!r}")
    normalizer = np.zeros(volume_shape)
    for o in origins:
        normalizer[tuple(slice(a, a + p) for a, p in zip(o, patch_size))] += weight
    return SlidingPlan(volume_shape, patch_size, overlap, origins, weight, normalizer)


@torch.no_grad()
def sliding_window_predict(image: np.ndarray | torch.Tensor, model: nn.Module, patch_size=(128, 128, 128),
                           overlap: float = 0.5, blend: str = "gaussian",
                           batch_size: int = 1) -> torch.Tensor:
    """Blend per-window logits over a whole volume; returns ``(1, C, X, Y, Z)``.

    ``image`` is ``(X, Y, Z)`` or ``(C_in, X, Y, Z)``. Volumes smaller than a
    patch are zero-padded symmetrically and cropped back. Windows are run in
    origin order, so ``batch_size`` only changes float rounding.
    """
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    if x.dim() == 3:
        x = x[None]
    in_ch = getattr(getattr(model, "cfg", None), "in_channels", x.shape[0])
    if x.shape[0] != in_ch:
        raise ValueError(f"model expects {in_ch} input channels, image has {x.shape[0]}")
    param = next(model.parameters())
    x = x.to(device=param.device, dtype=param.dtype)
    patch_size = tuple(int(p) for p in patch_size)

    orig = tuple(x.shape[1:])
    pad_lo = [max(p - s, 0) // 2 for s, p in zip(orig, patch_size)]
    pad_hi = [max(p - s, 0) - lo for s, p, lo in zip(orig, patch_size, pad_lo)]
    if any(pad_lo) or any(pad_hi):
        x = nn.functional.pad(x, (pad_lo[2], pad_hi[2], pad_lo[1], pad_hi[1], pad_lo[0], pad_hi[0]))
    shape = tuple(x.shape[1:])
    plan = make_plan(shape, patch_size, overlap, blend)

    was_training = model.training
    model.eval()
    weight = torch.as_tensor(plan.weight, dtype=x.dtype, device=x.device)
    acc = None
    try:
        for start in range(0, len(plan.origins), batch_size):
            chunk = plan.origins[start:start + batch_size]
            slices = [tuple(slice(a, a + p) for a, p in zip(o, patch_size)) for o in chunk]
            batch = torch.stack([x[(slice(None), *sl)] for sl in slices])
            logits = model(batch)
            if acc is None:
                acc = torch.zeros((logits.shape[1], *shape), dtype=x.dtype, device=x.device)
            for sl, out in zip(slices, logits):
                acc[(slice(None), *sl)] += out * weight
    finally:
        model.train(was_training)
    acc = acc / torch.as_tensor(plan.normalizer, dtype=x.dtype, device=x.device)
    crop = tuple(slice(lo, lo + s) for lo, s in zip(pad_lo, orig))
    return acc[(slice(None), *crop)][None]


def labels_from_logits(logits: torch.Tensor | np.ndarray) -> np.ndarray:
    """Voxel-wise argmax over the class axis (axis 1 for 5D, 0 for 4D); ties go to the lower id."""
    t = torch.as_tensor(logits)
    axis = 1 if t.dim() == 5 else 0
    if t.shape[axis] < 2:
        raise ValueError("need at least two classes")
    # numpy argmax returns the first maximum
    out = np.argmax(t.detach().cpu().numpy(), axis=axis)
    if t.dim() == 5:
        out = out[0] if out.shape[0] == 1 else out
    return out.astype(np.int16)
