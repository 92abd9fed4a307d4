"""Frame-quality metrics for [0,1]-ranged clips: L1, PSNR, SSIM.

PSNR assumes unit dynamic range and caps at 99 dB once MSE drops below
1e-10 (identical clips would otherwise hit -inf-adjacent territory).  SSIM
uses a 7x7 uniform window in valid mode (no padded borders), population
statistics, and the standard stabilizers C1 = (0.01)^2, C2 = (0.03)^2 for
range 1.0.  Region-restricted variants confine L1/PSNR to a binary mask;
SSIM stays global (windowed statistics do not restrict cleanly).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ContractError

PSNR_CAP_DB = 99.0
PSNR_CAP_MSE = 1e-10
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 7


@dataclass
class MetricReport:
    l1: float
    psnr: float
    ssim: float
    region_l1: float | None = None
    region_psnr: float | None = None

    def to_dict(self):
        return asdict(self)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1_error(a, b):
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """10*log10(1 / MSE) for unit range, capped at 99 dB near-identity."""
    err = mse(a, b)
    if err < PSNR_CAP_MSE:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / err)))


def _ssim_single(x, y, win):
    """SSIM map of one 2-D channel pair, valid-mode, population statistics."""
    h, w = x.shape
    if h < win or w < win:
        raise ContractError(f"image {h}x{w} smaller than the {win}x{win} window")
    r = win // 2
    ux = uniform_filter(x, win)[r:h - r, r:w - r]
    uy = uniform_filter(y, win)[r:h - r, r:w - r]
    uxx = uniform_filter(x * x, win)[r:h - r, r:w - r]
    uyy = uniform_filter(y * y, win)[r:h - r, r:w - r]
    uxy = uniform_filter(x * y, win)[r:h - r, r:w - r]
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    cxy = uxy - ux * uy
    num = (2 * ux * uy + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2)
    return num / den


def ssim(a, b, win=SSIM_WINDOW):
    """Mean SSIM. Accepts HxW, HxWxC, or NxHxWxC arrays in [0,1]."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        return float(np.mean(_ssim_single(a, b, win)))
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[..., c], b[..., c], win)
                              for c in range(a.shape[-1])]))
    if a.ndim == 4:
        return float(np.mean([ssim(a[k], b[k], win) for k in range(a.shape[0])]))
    raise ContractError(f"unsupported array rank {a.ndim}")


def region_l1(a, b, mask):
    """Mean absolute error over mask==1 cells; None when the mask is empty."""
    a, b = _pair(a, b)
    m = np.asarray(mask).astype(bool)
    if m.shape != a.shape[:m.ndim]:
        raise ContractError(f"mask shape {m.shape} does not prefix {a.shape}")
    if not m.any():
        return None
    diff = np.abs(a - b)
    return float(diff[m].mean())


def region_psnr(a, b, mask):
    a, b = _pair(a, b)
    m = np.asarray(mask).astype(bool)
    if m.shape != a.shape[:m.ndim]:
        raise ContractError(f"mask shape {m.shape} does not prefix {a.shape}")
    if not m.any():
        return None
    err = float(((a - b) ** 2)[m].mean())
    if err < PSNR_CAP_MSE:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / err)))


def evaluate(edited, reference, region_mask=None):
    """Full MetricReport for one clip pair (NxHxWx3 arrays or VideoClips)."""
    a = getattr(edited, "frames", edited)
    b = getattr(reference, "frames", reference)
    report = MetricReport(l1=l1_error(a, b), psnr=psnr(a, b), ssim=ssim(a, b))
    if region_mask is not None:
        report.region_l1 = region_l1(a, b, region_mask)
        report.region_psnr = region_psnr(a, b, region_mask)
    return report


def aggregate_reports(reports):
    """Mean of each metric over per-clip reports; empty-region entries skipped."""
    if not reports:
        raise ContractError("no reports to aggregate")
    out = {}
    for key in ("l1", "psnr", "ssim", "region_l1", "region_psnr"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out
