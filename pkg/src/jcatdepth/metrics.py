"""Training loss, evaluation metrics and the nearest-neighbour baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CSV_FIELDS = ("rmse_mm", "mae_mm", "irmse_ikm", "imae_ikm", "rel", "valid_count")


class EmptyMaskError(ValueError):
    """No pixel carries ground truth."""


def loss_l1_l2(pred: Tensor, gt) -> Tensor:
    """Mean over valid pixels of ``|r| + r^2`` with ``r = pred - gt``."""
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    mask = gt > 0
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("loss needs at least one valid ground-truth pixel")
    r = (pred - Tensor(gt.astype(pred.dtype))) * Tensor(mask.astype(pred.dtype))
    return (T.abs_(r) + r * r).sum() * (1.0 / n)


@dataclass
class MetricsRecord:
    rmse_mm: float
    mae_mm: float
    irmse_ikm: float
    imae_ikm: float
    rel: float
    valid_count: int
    inverse_skipped: int = 0

    def to_row(self) -> list:
        return [getattr(self, k) for k in CSV_FIELDS]

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred, gt, eps: float = 1e-6) -> MetricsRecord:
    """Pixel-pooled metrics over ``gt > 0``.

    Depths are metres. RMSE/MAE are reported in mm; iRMSE/iMAE use inverse
    depth in 1/km, skipping pixels whose prediction is at most ``eps``
    (their number is returned as ``inverse_skipped``).
    """
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    mask = gt > 0
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("metrics need at least one valid ground-truth pixel")
    p, g = pred[mask], gt[mask]
    err = p - g
    inv_ok = p > eps
    if inv_ok.any():
        ierr = 1000.0 / p[inv_ok] - 1000.0 / g[inv_ok]
        irmse, imae = float(np.sqrt(np.mean(ierr ** 2))), float(np.mean(np.abs(ierr)))
    else:
        irmse = imae = float("nan")
    return MetricsRecord(
        rmse_mm=float(np.sqrt(np.mean(err ** 2))) * 1000.0,
        mae_mm=float(np.mean(np.abs(err))) * 1000.0,
        irmse_ikm=irmse,
        imae_ikm=imae,
        rel=float(np.mean(np.abs(err) / g)),
        valid_count=n,
        inverse_skipped=int((~inv_ok).sum()),
    )


def baseline_fill(sparse) -> np.ndarray:
    """Fill every pixel with its nearest (Euclidean) sparse value.

    Ties go to the smaller row, then the smaller column. Takes an HxW map, a
    map with leading batch dims, or anything with a ``sparse`` attribute.
    """
    sparse = np.asarray(getattr(sparse, "sparse", sparse))
    if sparse.ndim > 2:
        flat = sparse.reshape((-1,) + sparse.shape[-2:])
        return np.stack([baseline_fill(m) for m in flat]).reshape(sparse.shape)
    H, W = sparse.shape
    rows, cols = np.nonzero(sparse > 0)  # row-major, so argmin breaks ties as required
    if rows.size == 0:
        raise EmptyMaskError("baseline fill needs at least one sparse point")
    vals = sparse[rows, cols]
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    out = np.empty_like(sparse)
    # chunk over pixels to bound the distance matrix
    pix_r, pix_c = rr.reshape(-1), cc.reshape(-1)
    flat = out.reshape(-1)
    step = max(1, 4_000_000 // rows.size)
    for s in range(0, pix_r.size, step):
        d2 = (pix_r[s:s + step, None] - rows[None]) ** 2 + (pix_c[s:s + step, None] - cols[None]) ** 2
        flat[s:s + step] = vals[np.argmin(d2, axis=1)]
    return out
