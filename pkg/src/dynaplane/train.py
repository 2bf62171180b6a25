"""Adam optimization loop with a coarse-to-fine schedule.

The fine (high-resolution) plane groups are frozen at zero until
coarse_iters: their queries are skipped (they contribute exact zeros), their
gradients are discarded, and their Adam step counters only start once the
fine phase begins.  Single-worker runs are bitwise reproducible for a fixed
seed; the metric log is a CSV with columns
iter,L_c,L_r,L_e,L_total,psnr_holdout.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .metrics import psnr
from .models import total_loss
from .planes import _HAVE_NUMBA, njit
from .render import RayBatch, camera_pixel_grid, generate_rays, ray_bbox_range, render_image

METRIC_COLUMNS = ("iter", "L_c", "L_r", "L_e", "L_total", "psnr_holdout")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    """First/second moment buffers and step count for one parameter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, arr):
        return cls(np.zeros_like(arr), np.zeros_like(arr))


@njit(cache=True)
def _nb_adam(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    for k in range(p.size):
        gk = g[k]
        mk = beta1 * m[k] + (1.0 - beta1) * gk
        vk = beta2 * v[k] + (1.0 - beta2) * gk * gk
        m[k] = mk
        v[k] = vk
        p[k] -= lr * (mk / bc1) / (np.sqrt(vk / bc2) + eps)


def adam_step(param, grad, state, lr, beta1=0.9, beta2=0.99, eps=1e-15):
    """Textbook Adam with bias correction, in place.  Returns False (and
    leaves the parameter untouched) when the gradient is non-finite."""
    if not np.isfinite(np.sum(grad, dtype=np.float64)):
        return False
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    if _HAVE_NUMBA and param.ndim and param.flags.c_contiguous:
        _nb_adam(param.reshape(-1), grad.reshape(-1), state.m.reshape(-1),
                 state.v.reshape(-1), lr, beta1, beta2, eps, bc1, bc2)
        return True
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * (grad * grad)
    m_hat = state.m / bc1
    v_hat = state.v / bc2
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
    return True


@dataclass
class TrainSchedule:
    """Optimization schedule.  coarse_iters freezes the fine planes at zero
    for the first portion of training; lr_decay is the total exponential
    decay factor reached at the final iteration (1.0 = constant)."""

    total_iters: int = 20000
    coarse_frac: float = 0.2
    ray_batch: int = 1024
    eikonal_batch: int = 1024
    lr_planes: float = 5e-4
    lr_mlp: float = 1e-4
    lr_scale: float = 1e-3
    lr_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    seed: int = 0
    log_every: int = 1
    eval_every: int = 1000
    checkpoint_every: int = 5000

    @property
    def coarse_iters(self):
        return int(round(self.coarse_frac * self.total_iters))

    def validate(self):
        if not 0.0 <= self.coarse_frac <= 1.0:
            raise ValueError("coarse_frac must lie in [0, 1]")
        if self.total_iters < 0:
            raise ValueError("total_iters must be nonnegative")
        return self


_GROUP_LR = {"plane-lr": "lr_planes", "plane-hr": "lr_planes",
             "mlp": "lr_mlp", "scale": "lr_scale"}


def build_ray_store(dataset, split="train", dtype=np.float32):
    """Flatten the dataset split into ray arrays (origins, dirs, times,
    near/far, gt colors, jitter keys).  Rays missing the bbox are dropped:
    they render exactly the background and carry no gradient."""
    origins, dirs, times, gts, keys = [], [], [], [], []
    nears, fars = [], []
    frames = [(i, fr) for i, fr in enumerate(dataset.frames)
              if fr.split == split]
    if not frames:
        raise ValueError(f"dataset has no '{split}' frames")
    for fi, fr in frames:
        cam = fr.camera
        px = camera_pixel_grid(cam)
        o, d = generate_rays(cam, px)
        img = dataset.load_image(fi).reshape(-1, 3)
        near, far, hit = ray_bbox_range(o, d, dataset.bbox)
        origins.append(o[hit])
        dirs.append(d[hit])
        times.append(np.full(hit.sum(), cam.t))
        gts.append(img[hit])
        pix_ids = np.nonzero(hit)[0].astype(np.uint64)
        keys.append((np.uint64(fi) << np.uint64(32)) | pix_ids)
        nears.append(near[hit])
        fars.append(far[hit])
    return {
        "origins": np.concatenate(origins).astype(dtype),
        "dirs": np.concatenate(dirs).astype(dtype),
        "times": np.concatenate(times).astype(dtype),
        "near": np.concatenate(nears).astype(dtype),
        "far": np.concatenate(fars).astype(dtype),
        "gt": np.concatenate(gts).astype(dtype),
        "keys": np.concatenate(keys),
    }


def _format_row(it, parts, total, psnr_val):
    ps = "" if psnr_val is None else repr(float(psnr_val))
    return (f"{it},{parts['l_c']!r},{parts['l_r']!r},{parts['l_e']!r},"
            f"{total!r},{ps}")


@dataclass
class TrainResult:
    model: object
    rows: list
    diverged: bool = False
    wall_seconds: float = 0.0
    checkpoints: list = field(default_factory=list)


def train(model, dataset, schedule, out_dir=None, start_iter=0, rng=None,
          adam_states=None, quiet=True, on_iteration=None):
    """Optimize model on the dataset's train split.

    Supports resuming: pass start_iter/rng/adam_states from a checkpoint and
    the run continues exactly where it stopped (the metric log of a resumed
    run concatenates with the original to match a straight-through run).
    """
    schedule.validate()
    if rng is None:
        rng = np.random.default_rng(schedule.seed)
    params = model.parameters()
    if adam_states is None:
        adam_states = {p.name: AdamState.like(p.data) for p in params}
    store = build_ray_store(dataset, "train", np.dtype(model.dtype))
    n_rays = len(store["origins"])
    holdout = [i for i, fr in enumerate(dataset.frames)
               if fr.split == "holdout"]
    probe = holdout[len(holdout) // 2] if holdout else None

    csv_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "metrics.csv")
        fresh = start_iter == 0 or not os.path.exists(csv_path)
        csv_fh = open(csv_path, "w" if fresh else "a")
        if fresh:
            csv_fh.write(",".join(METRIC_COLUMNS) + "\n")

    lo = np.asarray(model.bbox[0])
    hi = np.asarray(model.bbox[1])
    rows = []
    checkpoints = []
    t_start = time.perf_counter()
    try:
        for it in range(start_iter, schedule.total_iters):
            model.hr_active = it >= schedule.coarse_iters
            idx = rng.integers(0, n_rays, size=schedule.ray_batch)
            rays = RayBatch(store["origins"][idx], store["dirs"][idx],
                            store["times"][idx], store["near"][idx],
                            store["far"][idx], store["keys"][idx])
            gt = store["gt"][idx]
            eik = None
            if schedule.eikonal_batch > 0:
                t_e = store["times"][idx[int(rng.integers(len(idx)))]]
                pts = rng.uniform(0.0, 1.0, (schedule.eikonal_batch, 3))
                pts = lo + pts * (hi - lo)
                eik = np.concatenate(
                    [pts, np.full((len(pts), 1), t_e)], axis=1)

            model.zero_grad()
            seed_it = (schedule.seed * 1048573 + it) % (1 << 63)
            total, parts = total_loss(model, rays, gt, eik,
                                      stratified=True, seed=seed_it,
                                      accumulate=True)
            if not np.isfinite(total):
                _dump_divergence(out_dir, it, parts, total, model)
                raise TrainingDiverged(
                    f"non-finite loss at iteration {it}: "
                    f"L_c={parts['l_c']} L_r={parts['l_r']} L_e={parts['l_e']}")

            decay = (schedule.lr_decay ** (it / max(schedule.total_iters - 1, 1))
                     if schedule.lr_decay != 1.0 else 1.0)
            for p in params:
                if p.kind == "plane-hr" and not model.hr_active:
                    continue  # fine planes stay frozen at zero
                lr = getattr(schedule, _GROUP_LR[p.kind]) * decay
                adam_step(p.data, p.grad, adam_states[p.name], lr,
                          schedule.beta1, schedule.beta2, schedule.eps)

            psnr_val = None
            it1 = it + 1
            if probe is not None and (it1 % schedule.eval_every == 0
                                      or it1 == schedule.total_iters):
                fr = dataset.frames[probe]
                img, _ = render_image(model, fr.camera, model.cfg.n_samples,
                                      background=dataset.background)
                psnr_val = psnr(img, dataset.load_image(probe))
            if it1 % schedule.log_every == 0 or it1 == schedule.total_iters:
                row = _format_row(it1, parts, total, psnr_val)
                rows.append(row)
                if csv_fh:
                    csv_fh.write(row + "\n")
                    csv_fh.flush()
                if not quiet:
                    extra = f" psnr={psnr_val:.2f}" if psnr_val else ""
                    print(f"[{it1}/{schedule.total_iters}] "
                          f"L={total:.5f} c={parts['l_c']:.5f} "
                          f"r={parts['l_r']:.5f} e={parts['l_e']:.5f}{extra}",
                          flush=True)
            if on_iteration is not None:
                on_iteration(it1, model)
            if out_dir and schedule.checkpoint_every > 0 and (
                    it1 % schedule.checkpoint_every == 0
                    and it1 != schedule.total_iters):
                cp = os.path.join(out_dir, f"ckpt_{it1:06d}.t4d")
                save_checkpoint(cp, model, it1, rng, adam_states)
                checkpoints.append(cp)
    finally:
        if csv_fh:
            csv_fh.close()
    if out_dir is not None:
        cp = os.path.join(out_dir, "ckpt_final.t4d")
        save_checkpoint(cp, model, schedule.total_iters, rng, adam_states)
        checkpoints.append(cp)
    return TrainResult(model, rows, wall_seconds=time.perf_counter() - t_start,
                       checkpoints=checkpoints)


def _dump_divergence(out_dir, it, parts, total, model):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    stats = {p.name: {"max_abs": float(np.max(np.abs(p.data))),
                      "grad_max_abs": float(np.max(np.abs(p.grad)))}
             for p in model.parameters()}
    dump = {"iteration": it, "total": repr(total),
            "parts": {k: repr(v) for k, v in parts.items() if k != "batch"},
            "inv_s": model.scale.inv_s, "param_stats": stats}
    with open(os.path.join(out_dir, "divergence.json"), "w") as fh:
        json.dump(dump, fh, indent=1)
