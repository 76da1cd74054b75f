"""Dice similarity coefficient and mean surface distance, per case and per cohort.

Surface points are the centers of foreground voxels that have at least one
background 6-neighbor (the volume border counts as background), scaled by the
voxel spacing. The mean surface distance is directed: it averages, over the
reference surface, the distance to the closest predicted surface point.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

UNDEFINED = float("nan")


def is_undefined(value: float) -> bool:
    return isinstance(value, float) and math.isnan(value)


def dsc(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Overlap ``2|Y & Yhat| / (|Y| + |Yhat|)``; 1.0 when both masks are empty."""
    y = np.asarray(y, dtype=bool)
    y_hat = np.asarray(y_hat, dtype=bool)
    if y.shape != y_hat.shape:
        raise ValueError(f"mask shapes differ: {y.shape} vs {y_hat.shape}")
    total = int(y.sum()) + int(y_hat.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(y, y_hat).sum()) / total


_FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of foreground voxels with a background face neighbor."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_FACE_NEIGHBORS, border_value=0)
    return mask & ~interior


def extract_surface(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Surface points in mm, shape ``(N, 3)``; empty when the mask is empty."""
    idx = np.argwhere(surface_voxels(mask))
    return idx.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def msd(y_surface: np.ndarray, y_hat_surface: np.ndarray) -> float:
    """Directed mean distance from ``y_surface`` to ``y_hat_surface``.

    Returns :data:`UNDEFINED` (NaN) when either point set is empty.
    """
    y_surface = np.asarray(y_surface, dtype=np.float64).reshape(-1, 3)
    y_hat_surface = np.asarray(y_hat_surface, dtype=np.float64).reshape(-1, 3)
    if len(y_surface) == 0 or len(y_hat_surface) == 0:
        return UNDEFINED
    dist, _ = cKDTree(y_hat_surface).query(y_surface, k=1)
    return float(dist.mean())


def symmetric_msd(a: np.ndarray, b: np.ndarray) -> float:
    """Average of both directed distances over the union of surface points."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return UNDEFINED
    return (msd(a, b) * len(a) + msd(b, a) * len(b)) / (len(a) + len(b))


@dataclass
class CaseMetrics:
    case_id: str
    class_ids: list[int]
    dsc: dict[int, float]
    msd_mm: dict[int, float]

    def undefined(self, class_id: int) -> bool:
        return is_undefined(self.msd_mm[class_id])


def evaluate_case(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0),
                  class_ids=None, gt_spacing=None, case_id: str = "") -> CaseMetrics:
    """Per-class DSC and MSD of a predicted label volume against ground truth.

    MSD is measured from the ground-truth surface to the predicted one.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if gt_spacing is not None and not np.allclose(spacing, gt_spacing):
        raise ValueError(f"prediction spacing {tuple(spacing)} != ground truth spacing {tuple(gt_spacing)}")
    if class_ids is None:
        class_ids = sorted(int(c) for c in np.union1d(np.unique(gt), np.unique(pred)) if c != 0)
    class_ids = [int(c) for c in class_ids]
    dscs, msds = {}, {}
    for c in class_ids:
        y, y_hat = gt == c, pred == c
        dscs[c] = dsc(y, y_hat)
        msds[c] = msd(extract_surface(y, spacing), extract_surface(y_hat, spacing))
    return CaseMetrics(case_id, class_ids, dscs, msds)


def evaluate_cases(pairs, class_ids=None, workers: int = 1) -> list[CaseMetrics]:
    """Evaluate ``(case_id, pred, gt, spacing)`` tuples, optionally on a thread pool."""
    def run(item):
        case_id, pred, gt, spacing = item
        return evaluate_case(pred, gt, spacing, class_ids=class_ids, case_id=case_id)

    items = list(pairs)
    if workers <= 1:
        return [run(it) for it in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(run, items))


@dataclass
class CohortSummary:
    class_ids: list[int]
    mean_dsc: dict[int, float] = field(default_factory=dict)
    mean_msd: dict[int, float] = field(default_factory=dict)
    undefined_count: dict[int, int] = field(default_factory=dict)
    n_cases: int = 0

    @property
    def average_dsc(self) -> float:
        return float(np.mean([self.mean_dsc[c] for c in self.class_ids]))

    @property
    def average_msd(self) -> float:
        vals = [self.mean_msd[c] for c in self.class_ids if not is_undefined(self.mean_msd[c])]
        return float(np.mean(vals)) if vals else UNDEFINED


def aggregate(cases: list[CaseMetrics], class_ids=None) -> CohortSummary:
    """Per-class means across cases; undefined MSD entries are skipped and counted."""
    if class_ids is None:
        class_ids = sorted({c for case in cases for c in case.class_ids})
    out = CohortSummary(list(class_ids), n_cases=len(cases))
    for c in class_ids:
        d = [case.dsc[c] for case in cases if c in case.dsc]
        m = [case.msd_mm[c] for case in cases if c in case.msd_mm]
        defined = sorted(v for v in m if not is_undefined(v))
        out.mean_dsc[c] = float(np.mean(sorted(d))) if d else UNDEFINED
        out.mean_msd[c] = float(np.mean(defined)) if defined else UNDEFINED
        out.undefined_count[c] = len(m) - len(defined)
    return out
