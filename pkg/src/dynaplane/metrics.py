"""Image quality metrics and model evaluation over a dataset."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .render import render_image


def psnr(a, b, data_range=1.0):
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(mse / (data_range * data_range)))


def ssim(a, b, data_range=1.0, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
    population covariances, per-channel then averaged.  Matches the
    classical Wang et al. formulation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    truncate = 3.5
    radius = int(truncate * sigma + 0.5)  # 5 -> 11x11 window
    pad = radius
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        f = lambda img: gaussian_filter(img, sigma, truncate=truncate)
        ux, uy = f(x), f(y)
        uxx, uyy, uxy = f(x * x), f(y * y), f(x * y)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        vxy = uxy - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)
             / ((ux * ux + uy * uy + c1) * (vx + vy + c2)))
        vals.append(np.mean(s[pad:-pad, pad:-pad]))
    return float(np.mean(vals))


def evaluate(model, dataset, frame_indices=None, split=None, n_samples=None,
             chunk=8192):
    """Render dataset frames and score them against the stored images.

    Returns (records, summary): one record per frame with psnr/ssim, plus
    mean values (mean_psnr ignores +inf frames unless all are inf).
    """
    if frame_indices is None:
        frame_indices = [i for i, fr in enumerate(dataset.frames)
                         if split is None or fr.split == split]
    view_of = {}
    for v, idxs in enumerate(dataset.views()):
        for i in idxs:
            view_of[i] = v
    n_samples = n_samples or model.cfg.n_samples
    records = []
    for i in frame_indices:
        fr = dataset.frames[i]
        img, wsum = render_image(model, fr.camera, n_samples,
                                 background=dataset.background, chunk=chunk)
        ref = dataset.load_image(i)
        records.append({
            "frame": i, "view": view_of[i], "t": fr.t, "split": fr.split,
            "psnr": psnr(img, ref), "ssim": ssim(img, ref),
        })
    finite = [r["psnr"] for r in records if np.isfinite(r["psnr"])]
    summary = {
        "mean_psnr": float(np.mean(finite)) if finite else float("inf"),
        "mean_ssim": float(np.mean([r["ssim"] for r in records])),
        "n_frames": len(records),
    }
    return records, summary
