"""Image quality metrics and the cross-view reprojection-consistency score.

PSNR, SSIM, and MS-SSIM follow the canonical formulations: SSIM uses an
11x11 Gaussian window (sigma 1.5), k1 = 0.01, k2 = 0.03, dynamic range 1,
computed on Rec. 601 luma after clamping to [0, 1], over valid windows
(no padding). MS-SSIM uses 5 dyadic scales with weights (0.0448, 0.2856,
0.3001, 0.2363, 0.1333) and 2x average pooling between scales; at scales
where the image is smaller than 11 pixels the window shrinks to the
largest odd size that fits and sigma scales proportionally (1.5 * win/11),
and contrast terms are floored at zero before the weighted product.

The reprojection score quantifies cross-view consistency against known
geometry: for every ordered view pair (i, j), view i's foreground pixels
are lifted at ground-truth depth, projected into view j, and compared to
a bilinear sample of image j, restricted to pixels whose ground-truth
depth in view j agrees within tau (mutual visibility). Squared residuals
pool over all pairs, pixels, and color channels into one RMSE.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from crossview.geometry import project, unproject

__all__ = [
    "psnr",
    "ssim",
    "ms_ssim",
    "reprojection_consistency",
    "MetricReport",
    "write_reports",
]

_MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return np.clip(img, 0.0, 1.0)
    if img.ndim == 3 and img.shape[0] == 3:
        y = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        return np.clip(y, 0.0, 1.0)
    raise ValueError(f"expected (H, W) or (3, H, W), got {img.shape}")


def _gaussian_kernel(size, sigma):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(img, kernel):
    win = kernel.shape[0]
    sw = np.lib.stride_tricks.sliding_window_view(img, (win, win))
    return np.einsum("ijkl,kl->ij", sw, kernel, optimize=True)


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE); identical inputs give the +inf sentinel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _ssim_stats(ya, yb, win, sigma):
    c1 = 0.01**2
    c2 = 0.03**2
    k = _gaussian_kernel(win, sigma)
    mu_a = _window_means(ya, k)
    mu_b = _window_means(yb, k)
    e_aa = _window_means(ya * ya, k)
    e_bb = _window_means(yb * yb, k)
    e_ab = _window_means(ya * yb, k)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ssim(a, b, win=11, sigma=1.5):
    """Mean local SSIM over valid windows on clamped Rec. 601 luma."""
    ya, yb = _luma(a), _luma(b)
    if ya.shape != yb.shape:
        raise ValueError(f"shape mismatch {ya.shape} vs {yb.shape}")
    if min(ya.shape) < win:
        raise ValueError(f"image {ya.shape} smaller than window {win}")
    score, _ = _ssim_stats(ya, yb, win, sigma)
    return score


def _pool2(img):
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def ms_ssim(a, b, weights=_MS_WEIGHTS):
    """Multi-scale SSIM over 5 dyadic scales with shrinking windows."""
    ya, yb = _luma(a), _luma(b)
    if ya.shape != yb.shape:
        raise ValueError(f"shape mismatch {ya.shape} vs {yb.shape}")
    scales = len(weights)
    if min(ya.shape) < 2 ** (scales - 1):
        raise ValueError(f"extent {ya.shape} cannot support {scales} dyadic scales")
    result = 1.0
    for s in range(scales):
        ext = min(ya.shape)
        win = min(11, ext)
        if win % 2 == 0:
            win -= 1
        sigma = 1.5 * win / 11.0
        full, cs = _ssim_stats(ya, yb, win, sigma)
        if s < scales - 1:
            result *= max(cs, 0.0) ** weights[s]
            ya, yb = _pool2(ya), _pool2(yb)
        else:
            result *= max(full, 0.0) ** weights[s]
    return float(result)


def _bilinear_np(maps, coords):
    """Numpy bilinear sampling of (C, H, W) at (K, 2) (row, col) coords."""
    c, h, w = maps.shape
    r, q = coords[:, 0], coords[:, 1]
    valid = np.isfinite(r) & np.isfinite(q) & (r >= 0) & (r <= h - 1) & (q >= 0) & (q <= w - 1)
    r = np.where(valid, r, 0.0)
    q = np.where(valid, q, 0.0)
    r0 = np.minimum(np.floor(r), h - 2 if h > 1 else 0).astype(np.int64)
    q0 = np.minimum(np.floor(q), w - 2 if w > 1 else 0).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    q1 = np.minimum(q0 + 1, w - 1)
    fr, fq = r - r0, q - q0
    flat = maps.reshape(c, -1)
    out = (
        flat[:, r0 * w + q0] * ((1 - fr) * (1 - fq))
        + flat[:, r0 * w + q1] * ((1 - fr) * fq)
        + flat[:, r1 * w + q0] * (fr * (1 - fq))
        + flat[:, r1 * w + q1] * (fr * fq)
    )
    return out.T, valid


def reprojection_consistency(images, depths, poses, tau=0.01):
    """Cross-view color agreement at ground-truth geometry.

    Returns ``(rmse, details)``. ``details`` carries per-pair pixel counts
    and the list of skipped pairs (no mutually visible pixels). A single
    view is compared against itself and scores 0 up to projection roundoff.
    """
    n = len(images)
    if not (len(depths) == len(poses) == n) or n == 0:
        raise ValueError("need matching non-empty images, depths, poses")
    pairs = [(0, 0)] if n == 1 else [(i, j) for i in range(n) for j in range(n) if i != j]
    total_sq = 0.0
    total_cnt = 0
    pair_pixels = {}
    skipped = []
    big = 1e9  # stands in for +inf background depth during interpolation
    for i, j in pairs:
        img_i = np.asarray(images[i], dtype=np.float64)
        img_j = np.asarray(images[j], dtype=np.float64)
        dep_i = np.asarray(depths[i], dtype=np.float64)
        dep_j = np.where(np.isfinite(depths[j]), depths[j], big).astype(np.float64)
        fg = np.isfinite(dep_i)
        if not fg.any():
            skipped.append((i, j))
            continue
        vv, uu = np.nonzero(fg)
        uv = np.stack([uu.astype(np.float64), vv.astype(np.float64)], axis=1)
        pts = unproject(uv, dep_i[fg], poses[i])
        uv_j, z_j, front = project(pts, poses[j])
        coords = np.stack([uv_j[:, 1], uv_j[:, 0]], axis=1)
        coords[~front] = -1.0
        sampled_depth, ok = _bilinear_np(dep_j[None], coords)
        visible = ok & front & (np.abs(sampled_depth[:, 0] - z_j) <= tau)
        if not visible.any():
            skipped.append((i, j))
            continue
        sampled_rgb, _ = _bilinear_np(img_j, coords)
        ref_rgb = img_i[:, fg].T
        diff = ref_rgb[visible] - sampled_rgb[visible]
        total_sq += float((diff * diff).sum())
        total_cnt += diff.size
        pair_pixels[(i, j)] = int(visible.sum())
    if total_cnt == 0:
        raise ValueError("no mutually visible pixels in any view pair")
    rmse = math.sqrt(total_sq / total_cnt)
    return rmse, {"pair_pixels": pair_pixels, "skipped": skipped, "count": total_cnt}


@dataclass
class MetricReport:
    """Per-object evaluation record."""

    object_id: int
    psnr_values: list
    ssim_values: list
    ms_ssim_values: list
    reproj_rmse: float
    reproj_pixels: int
    reproj_skipped: list = field(default_factory=list)

    @staticmethod
    def _finite_mean(values):
        finite = [v for v in values if math.isfinite(v)]
        return sum(finite) / len(finite) if finite else math.inf

    @property
    def mean_psnr(self):
        return self._finite_mean(self.psnr_values)

    @property
    def mean_ssim(self):
        return self._finite_mean(self.ssim_values)

    @property
    def mean_ms_ssim(self):
        return self._finite_mean(self.ms_ssim_values)


def write_reports(reports, text_path, records_path):
    """Emit a flat key-value summary plus one JSON record per view/pair."""
    def fmt(v):
        return "inf" if math.isinf(v) else f"{v:.6f}"

    mean_psnr = MetricReport._finite_mean([r.mean_psnr for r in reports])
    mean_ssim = MetricReport._finite_mean([r.mean_ssim for r in reports])
    mean_ms = MetricReport._finite_mean([r.mean_ms_ssim for r in reports])
    mean_rep = MetricReport._finite_mean([r.reproj_rmse for r in reports])
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(f"objects {len(reports)}\n")
        fh.write(f"mean_psnr {fmt(mean_psnr)}\n")
        fh.write(f"mean_ssim {fmt(mean_ssim)}\n")
        fh.write(f"mean_ms_ssim {fmt(mean_ms)}\n")
        fh.write(f"mean_reprojection_rmse {fmt(mean_rep)}\n")
        for r in reports:
            fh.write(
                f"object {r.object_id} psnr {fmt(r.mean_psnr)} ssim {fmt(r.mean_ssim)} "
                f"ms_ssim {fmt(r.mean_ms_ssim)} reprojection_rmse {fmt(r.reproj_rmse)} "
                f"reprojection_pixels {r.reproj_pixels}\n"
            )
    with open(records_path, "w", encoding="utf-8") as fh:
        for r in reports:
            for v, (p, s, m) in enumerate(zip(r.psnr_values, r.ssim_values, r.ms_ssim_values)):
                rec = {
                    "object": r.object_id,
                    "view": v,
                    "psnr": None if math.isinf(p) else p,
                    "ssim": s,
                    "ms_ssim": m,
                }
                fh.write(json.dumps(rec) + "\n")
            rec = {
                "object": r.object_id,
                "reprojection_rmse": r.reproj_rmse,
                "reprojection_pixels": r.reproj_pixels,
                "skipped_pairs": [list(p) for p in r.reproj_skipped],
            }
            fh.write(json.dumps(rec) + "\n")
    return {
        "mean_psnr": mean_psnr,
        "mean_ssim": mean_ssim,
        "mean_ms_ssim": mean_ms,
        "mean_reprojection_rmse": mean_rep,
    }
