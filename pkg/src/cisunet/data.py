"""Volume I/O, resampling, intensity windowing, patch sampling and phantoms.

Dataset layout on disk::

    <data-dir>/images/<case>.nii.gz   # CT intensities (HU)
    <data-dir>/labels/<case>.nii.gz   # unsigned integer class ids (LABEL_NAMES)
"""

from __future__ import annotations

import gzip
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import nibabel as nib
import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

# id -> structure; ids follow the branch table order with the aorta first
LABEL_NAMES = (
    "background", "Aorta", "IA", "LCC", "LSA", "CA", "SMA", "LRA", "RRA",
    "LCIA", "LEIA", "LIIA", "RCIA", "REIA", "RIIA",
)
LABEL_IDS = {name: i for i, name in enumerate(LABEL_NAMES)}


def class_name(class_id: int) -> str:
    if 0 <= class_id < len(LABEL_NAMES):
        return LABEL_NAMES[class_id]
    return f"class_{class_id}"


class VolumeReadError(IOError):
    pass


@dataclass(frozen=True)
class Volume:
    """Dense 3D grid with its voxel-to-world affine.

    ``is_label`` selects nearest-neighbor handling in every resampling step.
    """

    data: np.ndarray
    affine: np.ndarray
    is_label: bool = False

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected a 3D grid, got shape {self.data.shape}")
        if np.any(self.spacing <= 0):
            raise ValueError(f"spacing must be positive, got {tuple(self.spacing)}")

    @property
    def spacing(self) -> np.ndarray:
        return np.sqrt((np.asarray(self.affine)[:3, :3] ** 2).sum(axis=0))

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.affine)[:3, 3]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def from_spacing(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                     is_label: bool = False) -> "Volume":
        affine = np.diag([*map(float, spacing), 1.0])
        affine[:3, 3] = origin
        return cls(np.asarray(data), affine, is_label)


def read_volume(path: str | Path, is_label: bool = False) -> Volume:
    """Load a NIfTI image (float32) or label map (int16, values must be integral)."""
    path = Path(path)
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises several unrelated types
        raise VolumeReadError(f"cannot read {path}: {exc}") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if is_label:
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
                raise VolumeReadError(f"{path}: label payload is not integral")
        data = data.astype(np.int16)
    else:
        data = data.astype(np.float32)
    return Volume(data, np.asarray(img.affine, dtype=np.float64), is_label)


def write_volume(vol: Volume, path: str | Path, header=None) -> None:
    data = vol.data.astype(np.uint8 if vol.is_label and vol.data.max(initial=0) < 256 else
                           (np.int16 if vol.is_label else np.float32))
    img = nib.Nifti1Image(data, vol.affine, header=header)
    img.set_qform(vol.affine, code=1)
    img.set_sform(vol.affine, code=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # fixed gzip mtime so identical volumes give identical bytes
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0,
                                                     filename="") as gz:
            gz.write(img.to_bytes())
    else:
        path.write_bytes(img.to_bytes())


def _resample_to(vol: Volume, out_shape, out_affine) -> Volume:
    """Sample ``vol`` on a grid given by ``out_shape``/``out_affine`` (same axes)."""
    in_sp = vol.spacing
    out_sp = np.sqrt((np.asarray(out_affine)[:3, :3] ** 2).sum(axis=0))
    scale = out_sp / in_sp
    if np.allclose(scale, 1.0) and tuple(out_shape) == vol.shape:
        return Volume(vol.data.copy(), np.asarray(out_affine, dtype=np.float64), vol.is_label)
    if vol.is_label:
        # nearest via index arithmetic, exact for integers
        idx = [np.clip(np.floor(np.arange(n) * s + 0.5).astype(int), 0, m - 1)
               for n, s, m in zip(out_shape, scale, vol.shape)]
        data = vol.data[np.ix_(*idx)]
    else:
        data = ndimage.affine_transform(
            vol.data.astype(np.float32), np.diag(scale), output_shape=tuple(out_shape),
            order=1, mode="nearest",
        )
    return Volume(data, np.asarray(out_affine, dtype=np.float64), vol.is_label)


def resampled_shape(shape, spacing, target: float) -> tuple[int, int, int]:
    return tuple(int(round(n * s / target)) for n, s in zip(shape, spacing))


def resample(vol: Volume, target_spacing: float = 1.5) -> Volume:
    """Resample to isotropic ``target_spacing`` mm (linear for images, nearest for labels).

    Voxel (0, 0, 0) keeps its world position; the output has
    ``round(n * spacing / target)`` voxels per axis.
    """
    out_shape = resampled_shape(vol.shape, vol.spacing, target_spacing)
    if min(out_shape) < 1:
        raise ValueError(f"resampling {vol.shape} at {tuple(vol.spacing)} mm to "
                         f"{target_spacing} mm gives an empty grid {out_shape}")
    direction = np.asarray(vol.affine)[:3, :3] / vol.spacing
    out_affine = np.eye(4)
    out_affine[:3, :3] = direction * target_spacing
    out_affine[:3, 3] = vol.origin
    return _resample_to(vol, out_shape, out_affine)


def restore_geometry(lbl: Volume, original: Volume) -> Volume:
    """Nearest-neighbor map of a label volume back onto ``original``'s grid."""
    if original is None or original.affine is None:
        raise ValueError("original geometry is missing")
    out = _resample_to(replace(lbl, is_label=True), original.shape, original.affine)
    return out


def normalize_intensity(vol: Volume, window=(-175.0, 250.0)) -> Volume:
    """Clamp to ``window`` and map linearly onto [0, 1]."""
    lo, hi = map(float, window)
    if not lo < hi:
        raise ValueError(f"need lo < hi, got {window}")
    data = (np.clip(vol.data.astype(np.float32), lo, hi) - lo) / (hi - lo)
    return Volume(data.astype(np.float32), vol.affine, vol.is_label)


@dataclass(frozen=True)
class SamplePatch:
    image: np.ndarray
    label: np.ndarray
    source: str
    origin: tuple[int, int, int]
    pad: tuple[int, int, int]
    foreground_draw: bool
    fallback: bool = False


def pad_to_size(arr: np.ndarray, size, value=0) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Symmetric pad up to ``size``; returns the low-side pad per axis."""
    before, widths = [], []
    for n, p in zip(arr.shape, size):
        extra = max(p - n, 0)
        lo = extra // 2
        before.append(lo)
        widths.append((lo, extra - lo))
    if any(w != (0, 0) for w in widths):
        arr = np.pad(arr, widths, mode="constant", constant_values=value)
    return arr, tuple(before)


def crop_pos_neg(image: np.ndarray, label: np.ndarray, patch_size, ratio=(1.0, 1.0),
                 rng: np.random.Generator | None = None, num_samples: int = 1,
                 source: str = "") -> list[SamplePatch]:
    """Random crops centered on a foreground voxel with probability pos/(pos+neg).

    Crop windows are clipped to the (padded) volume. When a foreground center
    is requested but the label has no foreground, a background center is used
    and the patch carries ``fallback=True``.
    """
    rng = np.random.default_rng() if rng is None else rng
    if image.shape != label.shape:
        raise ValueError(f"image {image.shape} and label {label.shape} differ in shape")
    pos, neg = map(float, ratio)
    if pos < 0 or neg < 0 or pos + neg <= 0:
        raise ValueError(f"invalid pos/neg ratio {ratio}")
    image, pad = pad_to_size(image, patch_size, value=float(image.min()) if image.size else 0.0)
    label, _ = pad_to_size(label, patch_size, value=0)

    fg = np.flatnonzero(label > 0)
    bg = np.flatnonzero(label == 0)
    p_fg = pos / (pos + neg)
    out = []
    for _ in range(num_samples):
        want_fg = bool(rng.random() < p_fg)
        fallback = False
        pool = fg if want_fg else bg
        if len(pool) == 0:
            fallback = True
            pool = bg if want_fg else fg
        center = np.unravel_index(pool[rng.integers(len(pool))], label.shape)
        origin = tuple(
            int(min(max(c - p // 2, 0), n - p)) for c, p, n in zip(center, patch_size, label.shape)
        )
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_size))
        if fallback:
            log.warning("%s: requested %s center unavailable, used the other class",
                        source or "volume", "foreground" if want_fg else "background")
        out.append(SamplePatch(image[sl].copy(), label[sl].copy(), source, origin, pad,
                               want_fg and not fallback, fallback))
    return out


def _tube(grid, start, end, radius):
    """Boolean capsule between two points."""
    p = np.stack(grid, axis=-1).astype(np.float64)
    a = np.asarray(start, dtype=np.float64)
    b = np.asarray(end, dtype=np.float64)
    ab = b - a
    t = np.clip(((p - a) @ ab) / float(ab @ ab), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1) <= radius


def synthetic_phantom(rng: np.random.Generator | int, size: int = 64, num_classes: int = 3,
                      spacing: float = 1.5) -> tuple[Volume, Volume]:
    """A bright trunk tube with side branches on a noisy background.

    Class 1 is the trunk; branches take ids 2..num_classes-1 in turn (with two
    classes every branch is class 1). Intensities are in HU.
    """
    if size < 32:
        raise ValueError(f"phantom size must be >= 32, got {size}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(rng)
    n = size
    grid = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    label = np.zeros((n, n, n), dtype=np.int16)

    center = n / 2 + rng.uniform(-0.05, 0.05, size=2) * n
    r_trunk = n * rng.uniform(0.07, 0.09)
    top = (n * 0.08, center[0], center[1])
    bottom = (n * 0.92, center[0] + rng.uniform(-0.08, 0.08) * n,
              center[1] + rng.uniform(-0.08, 0.08) * n)
    trunk = _tube(grid, top, bottom, r_trunk)

    n_branches = max(2, num_classes - 2)
    branch_ids = list(range(2, num_classes)) or [1]
    branches = []
    for k in range(n_branches):
        t = (k + 1) / (n_branches + 1)
        root = np.asarray(top) + t * (np.asarray(bottom) - np.asarray(top))
        angle = 2 * np.pi * k / n_branches + rng.uniform(-0.3, 0.3)
        reach = n * rng.uniform(0.28, 0.36)
        tip = root + np.array([n * rng.uniform(0.05, 0.12), reach * np.cos(angle),
                               reach * np.sin(angle)])
        tip = np.clip(tip, 2, n - 3)
        mask = _tube(grid, root, tip, n * rng.uniform(0.04, 0.055)) & ~trunk
        # keep the part attached to the trunk
        comps, count = ndimage.label(mask)
        if count > 1:
            touching = ndimage.binary_dilation(trunk) & mask
            keep = np.unique(comps[touching])
            keep = keep[keep > 0]
            mask = np.isin(comps, keep[:1]) if len(keep) else comps == 1
        branches.append((branch_ids[k % len(branch_ids)], mask))

    label[trunk] = 1
    for cid, mask in branches:
        label[mask & (label == 0)] = cid

    base = np.full(label.shape, 40.0)
    for cid in range(1, num_classes):
        base[label == cid] = 160.0 + 60.0 * cid
    image = ndimage.gaussian_filter(base, sigma=0.8) + rng.normal(0.0, 15.0, size=label.shape)
    img_vol = Volume.from_spacing(image.astype(np.float32), (spacing,) * 3)
    lbl_vol = Volume.from_spacing(label, (spacing,) * 3, is_label=True)
    return img_vol, lbl_vol


def list_cases(data_dir: str | Path) -> list[str]:
    """Case ids present in both ``images/`` and ``labels/``."""
    data_dir = Path(data_dir)
    def ids(sub):
        d = data_dir / sub
        if not d.is_dir():
            return set()
        return {p.name.split(".nii")[0] for p in d.iterdir() if ".nii" in p.name}
    return sorted(ids("images") & ids("labels"))


def case_paths(data_dir: str | Path, case: str) -> tuple[Path, Path]:
    data_dir = Path(data_dir)
    def find(sub):
        for ext in (".nii.gz", ".nii"):
            p = data_dir / sub / f"{case}{ext}"
            if p.exists():
                return p
        raise FileNotFoundError(data_dir / sub / f"{case}.nii.gz")
    return find("images"), find("labels")


def preprocess(image: Volume, label: Volume | None, target_spacing: float, window):
    """Resample (and window the image); returns arrays ready for the network."""
    img = normalize_intensity(resample(image, target_spacing), window)
    lbl = resample(label, target_spacing) if label is not None else None
    return img, lbl
