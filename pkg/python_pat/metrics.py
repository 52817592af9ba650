"""
Image quality measures for reconstructions.
"""

from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .exceptions import PatDataError, PatShapeError
from .models import EvalRecord, EvalReport, ScalarField

PSNR_CAP = 300.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03

EVAL_FIELDS = ['method', 'sample', 'err', 'rel_l2', 'psnr', 'ssim', 'iters', 'seconds']

ArrayLike = Union[ScalarField, np.ndarray]


def _pair(x: ArrayLike, x_true: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    a = x.data if isinstance(x, ScalarField) else np.asarray(x, dtype=np.float64)
    b = x_true.data if isinstance(x_true, ScalarField) else np.asarray(x_true, dtype=np.float64)
    if a.shape != b.shape:
        raise PatShapeError(f"reconstruction {a.shape} and reference {b.shape} differ in shape")
    return a, b


def unbiased_rel_error(x: ArrayLike, x_true: ArrayLike) -> Tuple[float, float, float]:
    """
    Relative error after the best affine intensity fit, min_{a,b} ||a x - x_true - b|| / ||x_true||.

    Args:
        x: Reconstruction
        x_true: Reference image (not identically zero)

    Returns:
        (err, a, b). A constant ``x`` gives a = 0 and b = -mean(x_true).

    Raises:
        PatDataError: If ``x_true`` is identically zero
    """
    x, t = _pair(x, x_true)
    norm = float(np.linalg.norm(t))
    if norm == 0:
        raise PatDataError("reference image is identically zero")
    xc = x - x.mean()
    tc = t - t.mean()
    var = float(np.vdot(xc, xc))
    a = float(np.vdot(xc, tc)) / var if np.ptp(x) > 0 else 0.0
    b = a * float(x.mean()) - float(t.mean())
    residual = a * xc - tc
    return float(np.linalg.norm(residual)) / norm, a, b


def rel_l2(x: ArrayLike, x_true: ArrayLike) -> float:
    x, t = _pair(x, x_true)
    norm = float(np.linalg.norm(t))
    if norm == 0:
        raise PatDataError("reference image is identically zero")
    return float(np.linalg.norm(x - t)) / norm


def psnr(x: ArrayLike, x_true: ArrayLike, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB, capped at ``PSNR_CAP``."""
    x, t = _pair(x, x_true)
    mse = float(np.mean((x - t) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * float(np.log10(peak ** 2 / mse)))


def ssim(x: ArrayLike, x_true: ArrayLike, data_range: float = 1.0) -> float:
    """
    Mean single-scale SSIM with an 11-wide Gaussian window (sigma 1.5).

    Raises:
        PatShapeError: If any axis is shorter than the window
    """
    x, t = _pair(x, x_true)
    if min(x.shape) < SSIM_WINDOW:
        raise PatShapeError(f"SSIM needs at least {SSIM_WINDOW} voxels per axis, got {x.shape}")
    truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA

    def window(f: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(f, SSIM_SIGMA, truncate=truncate, mode='reflect')

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = window(x)
    mu_t = window(t)
    var_x = window(x * x) - mu_x ** 2
    var_t = window(t * t) - mu_t ** 2
    cov = window(x * t) - mu_x * mu_t
    numerator = (2 * mu_x * mu_t + c1) * (2 * cov + c2)
    denominator = (mu_x ** 2 + mu_t ** 2 + c1) * (var_x + var_t + c2)
    return float(np.mean(numerator / denominator))


def evaluate(method: str, sample: int, x: ArrayLike, x_true: ArrayLike,
             iters: int = 0, seconds: float = 0.0) -> EvalRecord:
    """All quality measures of one reconstruction as an ``EvalRecord``."""
    err, _, _ = unbiased_rel_error(x, x_true)
    _, t = _pair(x, x_true)
    return EvalRecord(method=method, sample=int(sample), err=err, rel_l2=rel_l2(x, x_true),
                      psnr=psnr(x, x_true, peak=max(float(t.max()), 1e-12)), ssim=ssim(x, x_true),
                      iters=int(iters), seconds=float(seconds))


def report_rows(reports: Sequence[EvalReport], include_timing: bool = True) -> List[Dict]:
    """Flatten reports into CSV rows with the ``EVAL_FIELDS`` columns."""
    rows = []
    for report in reports:
        for record in report.records:
            rows.append({
                'method': record.method,
                'sample': record.sample,
                'err': f"{record.err:.10g}",
                'rel_l2': f"{record.rel_l2:.10g}",
                'psnr': f"{record.psnr:.10g}",
                'ssim': f"{record.ssim:.10g}",
                'iters': record.iters,
                'seconds': f"{record.seconds:.6f}" if include_timing else '',
            })
    return rows
