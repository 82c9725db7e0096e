"""Matting and instance-capture evaluation metrics.

SAD, Grad, and Conn report in the conventional kilo-scaled unit (raw sum /
1000); MSE is scaled by 100. Grad uses first-order Gaussian derivative
filters at sigma = 1.4; Conn uses the established threshold-sweep
connectivity formulation (thresholds 0.1 .. 0.9, distance cutoff 0.15).
Conn is evaluated pred-against-gt; the established joint-source formulation
happens to give the same value under argument swap.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .core import AlphaMatte, InstanceMask, ShapeError, binarize

GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_DIST_CUTOFF = 0.15
KILO = 1000.0


@dataclass(frozen=True)
class MetricReport:
    sad: float
    mse_x100: float
    grad: float
    conn: float
    iou: float

    def to_dict(self) -> dict:
        return asdict(self)


def _grids(pred, gt, what: str) -> tuple[np.ndarray, np.ndarray]:
    p = pred.alpha if isinstance(pred, AlphaMatte) else np.asarray(pred)
    g = gt.alpha if isinstance(gt, AlphaMatte) else np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"{what}: dims differ, {p.shape} vs {g.shape}")
    return p.astype(np.float64), g.astype(np.float64)


def sad(pred, gt) -> float:
    """Sum of absolute differences, kilo-scaled."""
    p, g = _grids(pred, gt, "sad")
    return float(np.abs(p - g).sum() / KILO)


def mse_x100(pred, gt) -> float:
    """Mean squared error scaled by 10^2."""
    p, g = _grids(pred, gt, "mse")
    return float(100.0 * np.mean((p - g) ** 2))


def gaussian_derivative_kernels(sigma: float = GRAD_SIGMA) -> tuple[np.ndarray, np.ndarray]:
    """The x- and y-derivative-of-Gaussian filters, L2-normalized."""
    eps = 1e-2
    half = int(np.ceil(sigma * np.sqrt(-2.0 * np.log(np.sqrt(2.0 * np.pi) * sigma * eps))))
    coords = np.arange(-half, half + 1, dtype=np.float64)
    gauss = np.exp(-coords ** 2 / (2.0 * sigma ** 2)) / (sigma * np.sqrt(2.0 * np.pi))
    dgauss = -coords * gauss / sigma ** 2
    hx = gauss[:, None] * dgauss[None, :]
    hx = hx / np.sqrt(np.sum(hx * hx))
    return hx, hx.T


def _gradient_amplitude(grid: np.ndarray) -> np.ndarray:
    hx, hy = gaussian_derivative_kernels()
    gx = _kernels.convolve2d_nearest(grid, hx)
    gy = _kernels.convolve2d_nearest(grid, hy)
    return np.sqrt(gx ** 2 + gy ** 2)


def grad_metric(pred, gt) -> float:
    """Squared difference of Gaussian-derivative gradient magnitudes, kilo-scaled."""
    p, g = _grids(pred, gt, "grad")
    diff = _gradient_amplitude(p) - _gradient_amplitude(g)
    return float(np.sum(diff ** 2) / KILO)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = _kernels.label_components(mask)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def conn_metric(pred, gt) -> float:
    """Connectivity error: per-pixel connectivity-degree difference against
    the largest source region connected in both mattes, swept over thresholds
    0.1 .. 0.9; kilo-scaled."""
    p, g = _grids(pred, gt, "conn")
    thresholds = np.round(np.arange(CONN_STEP, 1.0 - CONN_STEP / 2, CONN_STEP), 10)
    l_map = np.full(p.shape, -1.0)
    for i, th in enumerate(thresholds):
        joint = (p >= th) & (g >= th)
        omega = _largest_component(joint)
        newly_cut = (l_map == -1.0) & ~omega
        l_map[newly_cut] = thresholds[i - 1] if i > 0 else 0.0
    l_map[l_map == -1.0] = 1.0
    pd = p - l_map
    gd = g - l_map
    phi_p = 1.0 - pd * (pd >= CONN_DIST_CUTOFF)
    phi_g = 1.0 - gd * (gd >= CONN_DIST_CUTOFF)
    return float(np.abs(phi_p - phi_g).sum() / KILO)


def iou(pred_mask, gt_mask) -> float:
    """Intersection over union of the 0.5-binarized masks. Two empty masks
    score 1.0; exactly one empty scores 0.0."""
    p = binarize(pred_mask) if not isinstance(pred_mask, np.ndarray) else pred_mask >= 0.5
    g = binarize(gt_mask) if not isinstance(gt_mask, np.ndarray) else gt_mask >= 0.5
    if p.shape != g.shape:
        raise ShapeError(f"iou: dims differ, {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def compute_report(pred_matte: AlphaMatte, gt_matte: AlphaMatte,
                   pred_mask: InstanceMask | None = None,
                   gt_mask: InstanceMask | None = None) -> MetricReport:
    """Full metric row for one prediction; masks default to the binarized mattes."""
    p_mask = pred_mask.binarized if pred_mask is not None else pred_matte.alpha >= 0.5
    g_mask = gt_mask.binarized if gt_mask is not None else gt_matte.alpha >= 0.5
    return MetricReport(
        sad=sad(pred_matte, gt_matte),
        mse_x100=mse_x100(pred_matte, gt_matte),
        grad=grad_metric(pred_matte, gt_matte),
        conn=conn_metric(pred_matte, gt_matte),
        iou=iou(p_mask, g_mask),
    )


def reports_to_csv(rows: list[tuple[str, MetricReport]]) -> str:
    """CSV with one row per sample plus a mean aggregate row."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["sample", "sad", "mse_x100", "grad", "conn", "iou"])
    for name, rep in rows:
        writer.writerow([name, f"{rep.sad:.6f}", f"{rep.mse_x100:.6f}", f"{rep.grad:.6f}",
                         f"{rep.conn:.6f}", f"{rep.iou:.6f}"])
    if rows:
        agg = {k: float(np.mean([getattr(r, k) for _, r in rows]))
               for k in ("sad", "mse_x100", "grad", "conn", "iou")}
        writer.writerow(["aggregate", f"{agg['sad']:.6f}", f"{agg['mse_x100']:.6f}",
                         f"{agg['grad']:.6f}", f"{agg['conn']:.6f}", f"{agg['iou']:.6f}"])
    return buf.getvalue()


def reports_to_json(rows: list[tuple[str, MetricReport]]) -> str:
    payload = {name: rep.to_dict() for name, rep in rows}
    if rows:
        payload["aggregate"] = {k: float(np.mean([getattr(r, k) for _, r in rows]))
                                for k in ("sad", "mse_x100", "grad", "conn", "iou")}
    return json.dumps(payload, indent=2)
