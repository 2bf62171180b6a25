"""Ray generation, stratified sampling, SDF-based alpha compositing and the
eikonal surface penalty.

The geometry head outputs a signed distance, rendered with the logistic-CDF
opacity rule: alpha = max((Phi(k*s_i) - Phi(k*s_next)) / Phi(k*s_i), 0) with
a single learned sharpness k = inv_s.  Compositing uses exclusive-cumprod
transmittance with weights computed as transmittance differences, so
sum(weights) + T_final == 1 holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mlp import sigmoid, softplus
from .planes import normalize_coords


# ---------------------------------------------------------------------------
# cameras and rays
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, world-from-camera pose (3x4),
    and the capture timestamp.  Camera axes: +x right, +y down, +z forward;
    integer pixel coordinates are pixel centers."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # (3, 4) [R | t]
    t: float = 0.0

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (3, 4):
            raise ValueError(f"c2w must be (3, 4), got {self.c2w.shape}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        r = self.c2w[:, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def rotation(self):
        return self.c2w[:, :3]

    @property
    def position(self):
        return self.c2w[:, 3]

    @property
    def optical_axis(self):
        return self.c2w[:, 2]

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), **kw):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        nr = np.linalg.norm(right)
        if nr < 1e-9:
            raise ValueError("view direction parallel to up vector")
        right /= nr
        down = np.cross(fwd, right)  # +y is image-down
        c2w = np.stack([right, down, fwd], axis=1)
        c2w = np.concatenate([c2w, eye[:, None]], axis=1)
        return cls(c2w=c2w, **kw)

    def project(self, pts):
        """World points (N, 3) -> pixel coords (N, 2) and camera depth (N,)."""
        pts = np.atleast_2d(pts)
        pc = (pts - self.position) @ self.rotation
        i = self.fx * pc[:, 0] / pc[:, 2] + self.cx
        j = self.fy * pc[:, 1] / pc[:, 2] + self.cy
        return np.stack([i, j], axis=1), pc[:, 2]


def generate_rays(cam, pixels):
    """Back-project pixel coordinates (N, 2) as (i, j) = (column, row)
    through the pinhole; returns (origins (N, 3), unit directions (N, 3))."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d_cam = np.stack([(px[:, 0] - cam.cx) / cam.fx,
                      (px[:, 1] - cam.cy) / cam.fy,
                      np.ones(len(px))], axis=1)
    d_world = d_cam @ cam.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.position, d_world.shape).copy()
    return origins, d_world


def camera_pixel_grid(cam):
    """All pixel-center coordinates in row-major image order, shape (H*W, 2)."""
    i, j = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    return np.stack([i.ravel(), j.ravel()], axis=1).astype(np.float64)


@dataclass
class RayBatch:
    """Struct-of-arrays ray bundle. near/far bound the sampled segment;
    keys are per-ray uint64 identifiers used to seed stratified jitter."""

    origins: np.ndarray      # (N, 3)
    dirs: np.ndarray         # (N, 3) unit
    times: np.ndarray        # (N,)
    near: np.ndarray         # (N,)
    far: np.ndarray          # (N,)
    keys: np.ndarray = None  # (N,) uint64

    def __post_init__(self):
        n = len(self.origins)
        if self.keys is None:
            self.keys = np.arange(n, dtype=np.uint64)

    def __len__(self):
        return len(self.origins)

    def take(self, idx):
        return RayBatch(self.origins[idx], self.dirs[idx], self.times[idx],
                        self.near[idx], self.far[idx], self.keys[idx])


def ray_bbox_range(origins, dirs, bbox, min_near=1e-3):
    """Slab-test ray/box intersection.  Returns (near, far, hit); rays that
    miss get near == far (callers must check hit)."""
    lo = np.asarray(bbox[0], dtype=np.float64)
    hi = np.asarray(bbox[1], dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    # rays parallel to a slab: +-inf from the division sort correctly,
    # nan (origin exactly on a boundary with zero component) treated as miss
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    near = np.maximum(tmin, min_near)
    hit = tmax > near
    far = np.where(hit, tmax, near)
    return near, far, hit


# ---------------------------------------------------------------------------
# deterministic stratified jitter
# ---------------------------------------------------------------------------

_SM1 = np.uint64(0xBF58476D1CE4E5B9)
_SM2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _SM1
        x = (x ^ (x >> np.uint64(27))) * _SM2
        return x ^ (x >> np.uint64(31))


def hash01(seed, keys, lane):
    """Deterministic uniforms in [0, 1): one per (seed, key, lane) triple."""
    with np.errstate(over="ignore"):
        h = _splitmix(np.uint64(seed) * _GOLD + np.uint64(1))
        h = _splitmix(np.asarray(keys, dtype=np.uint64) + h)
        h = _splitmix(h + np.asarray(lane, dtype=np.uint64) * _GOLD)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def sample_depths(near, far, n_samples, stratified=False, seed=0, keys=None):
    """Depths at uniform bin centers over [near, far], shape (N, S).  With
    stratified=True each bin gets one uniform jitter derived only from
    (seed, ray key, bin), so identical seeds reproduce identical depths."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    near = np.asarray(near, dtype=np.float64)[:, None]
    far = np.asarray(far, dtype=np.float64)[:, None]
    lanes = np.arange(n_samples, dtype=np.uint64)[None, :]
    if stratified:
        if keys is None:
            raise ValueError("stratified sampling needs per-ray keys")
        u = hash01(seed, np.asarray(keys, dtype=np.uint64)[:, None], lanes)
    else:
        u = 0.5
    frac = (np.arange(n_samples)[None, :] + u) / n_samples
    return near + frac * (far - near)


# ---------------------------------------------------------------------------
# SDF -> opacity
# ---------------------------------------------------------------------------

@dataclass
class NeusScale:
    """Learnable sharpness of the logistic opacity CDF, stored as the log of
    inv_s so positivity is unconstrained."""

    theta: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta)
        if self.grad is None:
            self.grad = np.zeros_like(self.theta)

    @classmethod
    def create(cls, inv_s_init=20.0, dtype=np.float32):
        return cls(np.array(np.log(inv_s_init), dtype=dtype))

    @property
    def inv_s(self):
        return float(np.exp(self.theta))

    def zero_grad(self):
        self.grad[...] = 0.0


def sdf_to_alpha(s_i, s_next, scale, want_cache=False):
    """Opacity of the segment between two consecutive SDF samples.

    alpha = max((Phi(k s_i) - Phi(k s_next)) / Phi(k s_i), 0) with Phi the
    logistic CDF and k = scale.inv_s, evaluated in log space so extreme
    k*s values stay finite.  Zero whenever the SDF is nondecreasing.
    """
    s_i = np.asarray(s_i)
    s_next = np.asarray(s_next)
    k = s_i.dtype.type(scale.inv_s)
    xi = k * s_i
    xn = k * s_next
    e = softplus(-xi) - softplus(-xn)  # log(Phi(xn)/Phi(xi))
    alpha = -np.expm1(np.minimum(e, 0.0))
    if want_cache:
        return alpha, (s_i, s_next, xi, xn, alpha, k)
    return alpha


def sdf_to_alpha_backward(cache, d_alpha, scale):
    """Returns (d s_i, d s_next) and accumulates the sharpness gradient."""
    s_i, s_next, xi, xn, alpha, k = cache
    live = (alpha > 0.0).astype(s_i.dtype)
    r = (1.0 - alpha) * live  # exp(e) in the unclipped region
    si_g = sigmoid(-xi)
    sn_g = sigmoid(-xn)
    d_si = d_alpha * r * si_g * k
    d_sn = -d_alpha * r * sn_g * k
    d_inv_s = np.sum(d_alpha * r * (si_g * s_i - sn_g * s_next))
    scale.grad += np.asarray(d_inv_s * k, dtype=scale.grad.dtype)
    return d_si, d_sn


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def composite(alphas, colors, background):
    """Front-to-back alpha compositing.

    alphas (N, K), colors (N, K, 3), background (3,).  Returns
    (rgb (N, 3), weights (N, K), trans (N, K+1)); weights are transmittance
    differences so weights.sum(1) + trans[:, -1] == 1 exactly.
    """
    alphas = np.asarray(alphas)
    n, k = alphas.shape
    trans = np.empty((n, k + 1), dtype=alphas.dtype)
    trans[:, 0] = 1.0
    np.cumprod(1.0 - alphas, axis=1, out=trans[:, 1:])
    weights = trans[:, :-1] - trans[:, 1:]
    bg = np.asarray(background, dtype=colors.dtype)
    rgb = np.einsum("nk,nkc->nc", weights, colors) + trans[:, -1:] * bg
    return rgb, weights, trans


def composite_backward(alphas, colors, weights, trans, background, d_rgb):
    """Gradients of composite wrt alphas and colors (background is a fixed
    constant).  Uses a reverse tail recurrence, so no division by (1-alpha).
    """
    n, k = alphas.shape
    d_colors = weights[:, :, None] * d_rgb[:, None, :]
    d_alphas = np.empty_like(alphas)
    tail = np.broadcast_to(np.asarray(background, dtype=colors.dtype),
                           (n, 3)).copy()  # composite of everything after j
    for j in range(k - 1, -1, -1):
        d_alphas[:, j] = trans[:, j] * np.sum((colors[:, j] - tail) * d_rgb, axis=1)
        a = alphas[:, j:j + 1]
        tail = a * colors[:, j] + (1.0 - a) * tail
    return d_alphas, d_colors


# ---------------------------------------------------------------------------
# full ray rendering
# ---------------------------------------------------------------------------

@dataclass
class RaySampleBatch:
    """Everything produced by rendering one ray bundle, plus the caches the
    backward pass needs.  Arrays cover the bbox-hitting subset (hit_idx);
    rgb/weight_sum are expanded back to the full bundle."""

    rays: RayBatch
    hit_idx: np.ndarray
    depths: np.ndarray            # (H, S)
    positions: np.ndarray         # (H, S, 3)
    coords: np.ndarray            # (H*S, 4) normalized
    sdf: np.ndarray               # (H, S)
    alphas: np.ndarray            # (H, S-1)
    trans: np.ndarray             # (H, S)
    seg_colors: np.ndarray        # (H, S-1, 3)
    weights: np.ndarray           # (H, S-1)
    rgb: np.ndarray               # (N, 3) full bundle
    weight_sum: np.ndarray        # (N,) full bundle
    background: np.ndarray
    _field_cache: object = field(default=None, repr=False)
    _color_cache: object = field(default=None, repr=False)
    _alpha_cache: object = field(default=None, repr=False)

    def check_invariants(self, tol=1e-6):
        assert np.all(np.diff(self.depths, axis=1) > 0), "depths not increasing"
        assert np.all((self.alphas >= 0) & (self.alphas <= 1)), "alpha out of [0,1]"
        assert np.all(np.diff(self.trans, axis=1) <= tol), "transmittance increased"
        assert np.all(self.weights.sum(axis=1) <= 1 + tol), "weights exceed 1"


def render_rays(model, rays, n_samples, stratified=False, seed=0,
                background=(0.0, 0.0, 0.0)):
    """Sample -> query field -> SDF opacities -> composite, keeping every
    intermediate needed by render_backward.  Rays whose [near, far) segment
    is empty skip the model and return the background color."""
    dtype = model.dtype
    bg = np.asarray(background, dtype=dtype)
    n = len(rays)
    hit = rays.far > rays.near
    hit_idx = np.nonzero(hit)[0]
    rgb_full = np.tile(bg, (n, 1))
    wsum_full = np.zeros(n, dtype=dtype)
    rb = rays.take(hit_idx)
    h = len(rb)
    if h == 0:
        z = np.zeros((0, n_samples), dtype=dtype)
        return RaySampleBatch(rays, hit_idx, depths=z,
                              positions=np.zeros((0, n_samples, 3), dtype=dtype),
                              coords=np.zeros((0, 4), dtype=dtype), sdf=z,
                              alphas=z[:, 1:], trans=z,
                              seg_colors=np.zeros((0, n_samples - 1, 3), dtype=dtype),
                              weights=z[:, 1:], rgb=rgb_full,
                              weight_sum=wsum_full, background=bg)

    depths = sample_depths(rb.near, rb.far, n_samples, stratified, seed,
                           rb.keys).astype(dtype)
    positions = (rb.origins[:, None, :]
                 + rb.dirs[:, None, :] * depths[:, :, None]).astype(dtype)
    pts4 = np.concatenate(
        [positions.reshape(-1, 3),
         np.repeat(rb.times, n_samples).astype(dtype)[:, None]], axis=1)

    sdf_flat, feat, fcache = model.sdf_feat(pts4)
    sdf = sdf_flat.reshape(h, n_samples)
    alphas, acache = sdf_to_alpha(sdf[:, :-1], sdf[:, 1:], model.scale,
                                  want_cache=True)

    featdim = feat.shape[1]
    seg_feat = feat.reshape(h, n_samples, featdim)[:, :-1].reshape(-1, featdim)
    seg_dirs = np.repeat(rb.dirs.astype(dtype), n_samples - 1, axis=0)
    seg_rgb, ccache = model.color(seg_feat, seg_dirs)
    seg_colors = seg_rgb.reshape(h, n_samples - 1, 3)

    rgb, weights, trans = composite(alphas, seg_colors, bg)
    rgb_full[hit_idx] = rgb
    wsum_full[hit_idx] = weights.sum(axis=1)

    coords, _ = normalize_coords(pts4, model.bbox, model.time_range)
    return RaySampleBatch(rays, hit_idx, depths, positions, coords, sdf,
                          alphas, trans, seg_colors, weights, rgb_full,
                          wsum_full, bg, fcache, ccache, acache)


def render_backward(model, batch, d_rgb):
    """Backpropagate d(loss)/d(rgb) (full-bundle shape (N, 3)) through
    compositing, the color head, the opacity rule and the field query,
    accumulating into every parameter gradient buffer."""
    h, s = batch.sdf.shape
    if h == 0:
        return
    d_rgb_hit = np.asarray(d_rgb)[batch.hit_idx].astype(batch.sdf.dtype)
    d_alphas, d_colors = composite_backward(
        batch.alphas, batch.seg_colors, batch.weights, batch.trans,
        batch.background, d_rgb_hit)

    d_feat_seg = model.color_backward(batch._color_cache,
                                      d_colors.reshape(-1, 3))
    featdim = d_feat_seg.shape[1]
    d_feat = np.zeros((h, s, featdim), dtype=d_feat_seg.dtype)
    d_feat[:, :-1] = d_feat_seg.reshape(h, s - 1, featdim)

    d_si, d_sn = sdf_to_alpha_backward(batch._alpha_cache, d_alphas, model.scale)
    d_sdf = np.zeros_like(batch.sdf)
    d_sdf[:, :-1] += d_si
    d_sdf[:, 1:] += d_sn

    model.sdf_feat_backward(batch._field_cache, d_sdf.reshape(-1),
                            d_feat.reshape(-1, featdim))


def render_image(model, camera, n_samples, background=(0, 0, 0), chunk=8192):
    """Deterministic full-frame render (unstratified bin centers).  Returns
    (rgb image (H, W, 3), weight-sum map (H, W))."""
    px = camera_pixel_grid(camera)
    origins, dirs = generate_rays(camera, px)
    near, far, hit = ray_bbox_range(origins, dirs, model.bbox)
    times = np.full(len(px), camera.t)
    img = np.zeros((len(px), 3), dtype=np.float64)
    wsum = np.zeros(len(px), dtype=np.float64)
    for lo in range(0, len(px), chunk):
        sl = slice(lo, min(lo + chunk, len(px)))
        rays = RayBatch(origins[sl].astype(model.dtype),
                        dirs[sl].astype(model.dtype),
                        times[sl].astype(model.dtype),
                        near[sl].astype(model.dtype),
                        np.where(hit[sl], far[sl], near[sl]).astype(model.dtype))
        batch = render_rays(model, rays, n_samples, stratified=False,
                            background=background)
        img[sl] = batch.rgb
        wsum[sl] = batch.weight_sum
    img = img.reshape(camera.height, camera.width, 3)
    return np.clip(img, 0.0, 1.0), wsum.reshape(camera.height, camera.width)


# ---------------------------------------------------------------------------
# eikonal surface constraint
# ---------------------------------------------------------------------------

def eikonal_loss(sdf_field, pts, steps, accumulate_grad=True, want_dpts=False,
                 weight=1.0):
    """Mean squared deviation of the finite-difference SDF gradient norm
    from 1, over sample points.

    sdf_field must provide sdf(pts) -> (values, cache) and, when gradients
    are requested, sdf_backward(cache, d_values) -> d_pts (or None).  pts is
    (N, D>=3); the first three axes are perturbed by +-steps (world units).
    Returns (loss, d_pts): the loss is unweighted, accumulated gradients are
    scaled by weight; d_pts is the (weighted) gradient wrt the unperturbed
    points when want_dpts, else None.
    """
    pts = np.atleast_2d(pts)
    n, d = pts.shape
    steps = np.asarray(steps, dtype=pts.dtype)
    stacked = np.tile(pts, (6, 1))
    for a in range(3):
        stacked[2 * a * n:(2 * a + 1) * n, a] += steps[a]
        stacked[(2 * a + 1) * n:(2 * a + 2) * n, a] -= steps[a]
    svals, cache = sdf_field.sdf(stacked)
    s = svals.reshape(6, n)
    g = np.stack([(s[2 * a] - s[2 * a + 1]) / (2.0 * steps[a])
                  for a in range(3)], axis=1)  # (N, 3)
    norm = np.sqrt(np.sum(g * g, axis=1) + 1e-20)
    resid = norm - 1.0
    loss = float(np.mean(resid * resid))
    if not accumulate_grad:
        return loss, None
    d_norm = weight * 2.0 * resid / n
    d_g = (d_norm / norm)[:, None] * g  # (N, 3)
    d_s = np.empty((6, n), dtype=pts.dtype)
    for a in range(3):
        d_s[2 * a] = d_g[:, a] / (2.0 * steps[a])
        d_s[2 * a + 1] = -d_g[:, a] / (2.0 * steps[a])
    d_stacked = sdf_field.sdf_backward(cache, d_s.reshape(-1))
    if not want_dpts:
        return loss, None
    if d_stacked is None:
        raise ValueError("sdf_field does not expose point gradients")
    return loss, d_stacked.reshape(6, n, d).sum(axis=0)
