"""Factorized feature-plane storage for 4D spatio-temporal fields.

A 4D field f(x, y, z, t) is stored as nine learnable 2D feature planes:
three purely spatial planes (xy, xz, yz) and six spatio-temporal ones
(two independent planes each for xt, yt, zt).  A 3D field uses the three
spatial planes only.  Querying a point bilinearly samples each plane at
the two coordinates it is indexed by and concatenates the results, so a
point lookup costs O(planes * channels) instead of touching a dense 4D
grid.  All sampling uses the align-corners convention: normalized 0 maps
to cell center (0, 0) and 1 to cell center (n-1, n-1).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

try:  # hot bilinear loops run ~5x faster jitted; numpy fallback stays exact
    if os.environ.get("DYNAPLANE_NO_NUMBA"):
        raise ImportError("numba disabled by DYNAPLANE_NO_NUMBA")
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via DYNAPLANE_NO_NUMBA
    _HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(fn):
            return fn
        return deco

AXIS_INDEX = {"x": 0, "y": 1, "z": 2, "t": 3}

# Canonical plane order for a 9-plane set. Order is a stable contract
# (checkpoint layout and feature concatenation depend on it): the three
# planes projected out of the z-volume, then the y-volume, then the
# x-volume, each listed as (spatial, mixed, mixed).
PLANE_AXES_9 = (
    ("x", "y"), ("x", "t"), ("y", "t"),
    ("x", "z"), ("x", "t"), ("z", "t"),
    ("y", "z"), ("y", "t"), ("z", "t"),
)

# Spatial-only set used by canonical 3D fields.
PLANE_AXES_3 = (("x", "y"), ("x", "z"), ("y", "z"))


class InvalidInputError(ValueError):
    """Raised when an operation receives non-finite or malformed inputs."""


@dataclass
class FeaturePlane:
    """A learnable 2D grid of C-channel feature vectors.

    data has shape (resolution_u, resolution_v, channels); grad is a
    same-shaped accumulation buffer.  axis_labels names the two
    coordinates (drawn from x/y/z/t) that index the plane.
    """

    resolution_u: int
    resolution_v: int
    channels: int
    axis_labels: tuple[str, str]
    data: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.axis_labels[0] == self.axis_labels[1]:
            raise ValueError(f"axis labels must be distinct, got {self.axis_labels}")
        for a in self.axis_labels:
            if a not in AXIS_INDEX:
                raise ValueError(f"unknown axis label {a!r}")
        expected = (self.resolution_u, self.resolution_v, self.channels)
        if self.data.shape != expected:
            raise ValueError(f"plane data shape {self.data.shape} != {expected}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("plane data contains non-finite values")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    @classmethod
    def create(cls, resolution, channels, axis_labels, init_scale=0.0, rng=None,
               dtype=np.float32):
        """Square plane, uniform init in [-init_scale, init_scale] (0 => zeros)."""
        if init_scale > 0.0:
            if rng is None:
                raise ValueError("init_scale > 0 requires an rng")
            data = rng.uniform(-init_scale, init_scale,
                               size=(resolution, resolution, channels)).astype(dtype)
        else:
            data = np.zeros((resolution, resolution, channels), dtype=dtype)
        return cls(resolution, resolution, channels, tuple(axis_labels), data)

    def zero_grad(self):
        self.grad[...] = 0.0

    @property
    def n_params(self):
        return self.resolution_u * self.resolution_v * self.channels


def _bilinear_corners(plane, u, v):
    """Corner indices and fractional weights for align-corners sampling.

    u, v: arrays in [0, 1] (caller clamps).  Returns flat corner indices
    into data.reshape(U*V, C) plus fractional offsets fu, fv.
    """
    nu, nv = plane.resolution_u, plane.resolution_v
    gu = u * (nu - 1)
    gv = v * (nv - 1)
    i0 = np.minimum(np.floor(gu), max(nu - 2, 0)).astype(np.int64)
    j0 = np.minimum(np.floor(gv), max(nv - 2, 0)).astype(np.int64)
    fu = (gu - i0).astype(plane.data.dtype)
    fv = (gv - j0).astype(plane.data.dtype)
    i1 = np.minimum(i0 + 1, nu - 1)
    j1 = np.minimum(j0 + 1, nv - 1)
    base = i0 * nv
    return (base + j0, i1 * nv + j0, base + j1, i1 * nv + j1), fu, fv


@njit(cache=True)
def _nb_gather(flat, nu, nv, u, v, out, i0a, j0a, fua, fva):
    """Fused corner/weight computation + 4-tap gather.  Fills the backward
    cache arrays (i0a, j0a, fua, fva) as a side effect."""
    n, c = out.shape
    for k in range(n):
        gu = u[k] * (nu - 1)
        gv = v[k] * (nv - 1)
        i0 = int(gu)
        if i0 > nu - 2:
            i0 = nu - 2 if nu > 1 else 0
        j0 = int(gv)
        if j0 > nv - 2:
            j0 = nv - 2 if nv > 1 else 0
        fu = gu - i0
        fv = gv - j0
        i1 = i0 + 1 if i0 + 1 < nu else nu - 1
        j1 = j0 + 1 if j0 + 1 < nv else nv - 1
        i0a[k] = i0
        j0a[k] = j0
        fua[k] = fu
        fva[k] = fv
        a = i0 * nv + j0
        b = i1 * nv + j0
        d = i0 * nv + j1
        e = i1 * nv + j1
        w00 = (1.0 - fu) * (1.0 - fv)
        w10 = fu * (1.0 - fv)
        w01 = (1.0 - fu) * fv
        w11 = fu * fv
        for j in range(c):
            out[k, j] = (w00 * flat[a, j] + w10 * flat[b, j]
                         + w01 * flat[d, j] + w11 * flat[e, j])


@njit(cache=True)
def _nb_scatter(gflat, nu, nv, i0a, j0a, fua, fva, up):
    n, c = up.shape
    for k in range(n):
        i0 = i0a[k]
        j0 = j0a[k]
        fu = fua[k]
        fv = fva[k]
        i1 = i0 + 1 if i0 + 1 < nu else nu - 1
        j1 = j0 + 1 if j0 + 1 < nv else nv - 1
        a = i0 * nv + j0
        b = i1 * nv + j0
        d = i0 * nv + j1
        e = i1 * nv + j1
        w00 = (1.0 - fu) * (1.0 - fv)
        w10 = fu * (1.0 - fv)
        w01 = (1.0 - fu) * fv
        w11 = fu * fv
        for j in range(c):
            g = up[k, j]
            gflat[a, j] += w00 * g
            gflat[b, j] += w10 * g
            gflat[d, j] += w01 * g
            gflat[e, j] += w11 * g


@njit(cache=True)
def _nb_pos_grad(flat, nu, nv, i0a, j0a, fua, fva, up, su, sv, du, dv):
    n, c = up.shape
    for k in range(n):
        i0 = i0a[k]
        j0 = j0a[k]
        fu = fua[k]
        fv = fva[k]
        i1 = i0 + 1 if i0 + 1 < nu else nu - 1
        j1 = j0 + 1 if j0 + 1 < nv else nv - 1
        a = i0 * nv + j0
        b = i1 * nv + j0
        d = i0 * nv + j1
        e = i1 * nv + j1
        au = 0.0
        av = 0.0
        for j in range(c):
            g = up[k, j]
            au += g * ((1.0 - fv) * (flat[b, j] - flat[a, j])
                       + fv * (flat[e, j] - flat[d, j]))
            av += g * ((1.0 - fu) * (flat[d, j] - flat[a, j])
                       + fu * (flat[e, j] - flat[b, j]))
        du[k] = au * su
        dv[k] = av * sv


def bilinear_sample(plane, u, v):
    """Bilinearly interpolate plane features at normalized coords (u, v).

    (0, 0) hits cell center (0, 0); (1, 1) hits cell center (n-1, n-1).
    Coordinates outside [0, 1] are clamped.  Accepts scalars or arrays;
    returns (C,) or (N, C).
    """
    u = np.asarray(u, dtype=plane.data.dtype)
    v = np.asarray(v, dtype=plane.data.dtype)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise InvalidInputError("non-finite plane sample coordinates")
    scalar = u.ndim == 0
    u = np.clip(np.atleast_1d(u), 0.0, 1.0)
    v = np.clip(np.atleast_1d(v), 0.0, 1.0)
    out, _ = _sample_with_cache(plane, u, v)
    return out[0] if scalar else out


def _sample_with_cache(plane, u, v):
    """Sample already-clamped coords, returning values and a backward cache
    of (i0, j0, fu, fv) per point."""
    nu, nv = plane.resolution_u, plane.resolution_v
    flat = plane.data.reshape(-1, plane.channels)
    if _HAVE_NUMBA:
        n = len(u)
        out = np.empty((n, plane.channels), dtype=plane.data.dtype)
        i0 = np.empty(n, dtype=np.int64)
        j0 = np.empty(n, dtype=np.int64)
        fu = np.empty(n, dtype=plane.data.dtype)
        fv = np.empty(n, dtype=plane.data.dtype)
        _nb_gather(flat, nu, nv, u, v, out, i0, j0, fu, fv)
        return out, (i0, j0, fu, fv)
    corners, fu, fv = _bilinear_corners(plane, u, v)
    c00, c10, c01, c11 = (flat[idx] for idx in corners)
    w00 = (1.0 - fu) * (1.0 - fv)
    w10 = fu * (1.0 - fv)
    w01 = (1.0 - fu) * fv
    w11 = fu * fv
    out = (w00[:, None] * c00 + w10[:, None] * c10
           + w01[:, None] * c01 + w11[:, None] * c11)
    i0 = corners[0] // nv
    j0 = corners[0] - i0 * nv
    return out, (i0, j0, fu, fv)


def _corners_from_cache(plane, cache):
    nu, nv = plane.resolution_u, plane.resolution_v
    i0, j0, fu, fv = cache
    i1 = np.minimum(i0 + 1, nu - 1)
    j1 = np.minimum(j0 + 1, nv - 1)
    base = i0 * nv
    return (base + j0, i1 * nv + j0, base + j1, i1 * nv + j1), fu, fv


def _scatter_backward(plane, cache, upstream, want_pos=False):
    """Accumulate d(out)/d(plane data) into plane.grad; optionally return
    (du, dv) in normalized coordinates (including the (n-1) grid scaling).
    Accumulation is a serial scatter: deterministic for a fixed batch order.
    """
    nu, nv, ch = plane.resolution_u, plane.resolution_v, plane.channels
    gflat = plane.grad.reshape(-1, ch)
    flat = plane.data.reshape(-1, ch)
    if _HAVE_NUMBA:
        i0, j0, fu, fv = cache
        up = (upstream if upstream.dtype == plane.grad.dtype
              else upstream.astype(plane.grad.dtype))
        _nb_scatter(gflat, nu, nv, i0, j0, fu, fv, up)
        if not want_pos:
            return None
        du = np.empty_like(fu)
        dv = np.empty_like(fv)
        _nb_pos_grad(flat, nu, nv, i0, j0, fu, fv, up,
                     plane.data.dtype.type(nu - 1),
                     plane.data.dtype.type(nv - 1), du, dv)
        return du, dv

    upstream = np.ascontiguousarray(upstream, dtype=plane.grad.dtype)
    corners, fu, fv = _corners_from_cache(plane, cache)
    w = np.stack([(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv),
                  (1.0 - fu) * fv, fu * fv])  # (4, N)
    idx = np.concatenate(corners)  # (4N,)
    wts = (w[:, :, None] * upstream[None, :, :]).reshape(-1, ch)
    lane = (idx[:, None] * ch + np.arange(ch, dtype=np.int64)[None, :]).ravel()
    acc = np.bincount(lane, weights=wts.ravel(), minlength=nu * nv * ch)
    plane.grad += acc.reshape(nu, nv, ch).astype(plane.grad.dtype)
    if not want_pos:
        return None
    c00, c10, c01, c11 = (flat[i] for i in corners)
    dgu = ((1.0 - fv)[:, None] * (c10 - c00) + fv[:, None] * (c11 - c01))
    dgv = ((1.0 - fu)[:, None] * (c01 - c00) + fu[:, None] * (c11 - c10))
    du = np.sum(dgu * upstream, axis=1) * (nu - 1)
    dv = np.sum(dgv * upstream, axis=1) * (nv - 1)
    return du, dv


@dataclass
class PlaneSet9:
    """Nine planes factorizing a 4D field (3 spatial + 6 spatio-temporal).

    Planes follow PLANE_AXES_9 order; the two planes sharing an axis pair
    carry independent parameters.  All planes share channels and a square
    resolution.
    """

    planes: list

    def __post_init__(self):
        if len(self.planes) != 9:
            raise ValueError(f"PlaneSet9 needs 9 planes, got {len(self.planes)}")
        labels = tuple(p.axis_labels for p in self.planes)
        if labels != PLANE_AXES_9:
            raise ValueError(f"plane axis labels {labels} != {PLANE_AXES_9}")
        res = {p.resolution_u for p in self.planes} | {p.resolution_v for p in self.planes}
        if len(res) != 1:
            raise ValueError("all planes in a set must share one square resolution")
        if len({p.channels for p in self.planes}) != 1:
            raise ValueError("all planes in a set must share channel count")

    @classmethod
    def create(cls, resolution, channels, init_scale=0.0, rng=None, dtype=np.float32):
        return cls([FeaturePlane.create(resolution, channels, ax, init_scale, rng, dtype)
                    for ax in PLANE_AXES_9])

    @property
    def resolution(self):
        return self.planes[0].resolution_u

    @property
    def channels(self):
        return self.planes[0].channels

    @property
    def n_params(self):
        return sum(p.n_params for p in self.planes)

    def zero_grad(self):
        for p in self.planes:
            p.zero_grad()


@dataclass
class PlaneSet3:
    """Three spatial planes (xy, xz, yz) factorizing a static 3D field."""

    planes: list

    def __post_init__(self):
        if len(self.planes) != 3:
            raise ValueError(f"PlaneSet3 needs 3 planes, got {len(self.planes)}")
        labels = tuple(p.axis_labels for p in self.planes)
        if labels != PLANE_AXES_3:
            raise ValueError(f"plane axis labels {labels} != {PLANE_AXES_3}")
        if len({p.resolution_u for p in self.planes} | {p.resolution_v for p in self.planes}) != 1:
            raise ValueError("all planes in a set must share one square resolution")
        if len({p.channels for p in self.planes}) != 1:
            raise ValueError("all planes in a set must share channel count")

    @classmethod
    def create(cls, resolution, channels, init_scale=0.0, rng=None, dtype=np.float32):
        return cls([FeaturePlane.create(resolution, channels, ax, init_scale, rng, dtype)
                    for ax in PLANE_AXES_3])

    @property
    def resolution(self):
        return self.planes[0].resolution_u

    @property
    def channels(self):
        return self.planes[0].channels

    @property
    def n_params(self):
        return sum(p.n_params for p in self.planes)

    def zero_grad(self):
        for p in self.planes:
            p.zero_grad()


@dataclass
class Tensor4DField:
    """Two-scale factorized 4D field: one coarse and one fine 9-plane set.

    bbox is ((xmin, ymin, zmin), (xmax, ymax, zmax)) in scene units;
    time_range is (t_min, t_max).
    """

    lr: PlaneSet9
    hr: PlaneSet9
    bbox: tuple
    time_range: tuple

    def __post_init__(self):
        if not self.lr.resolution < self.hr.resolution:
            raise ValueError("coarse resolution must be below fine resolution")
        lo, hi = np.asarray(self.bbox[0], float), np.asarray(self.bbox[1], float)
        if not np.all(hi > lo):
            raise ValueError("bbox must have positive extent on all axes")
        if not self.time_range[1] > self.time_range[0]:
            raise ValueError("time_range must be nonempty")

    @classmethod
    def create(cls, n_lr=128, n_hr=512, channels=8, bbox=((-1, -1, -1), (1, 1, 1)),
               time_range=(0.0, 1.0), rng=None, dtype=np.float32,
               lr_init_scale=1e-4):
        """Coarse planes start at small uniform noise, fine planes at exact
        zero so enabling the fine scale later is continuous in the loss."""
        if rng is None:
            rng = np.random.default_rng(0)
        return cls(PlaneSet9.create(n_lr, channels, lr_init_scale, rng, dtype),
                   PlaneSet9.create(n_hr, channels, 0.0, rng, dtype),
                   bbox, time_range)


def normalize_coords(pts, bbox, time_range):
    """Affine-map world (x, y, z, t) points into [0, 1]^4.

    pts: (N, 4) or (4,).  Returns (coords, in_bounds): coordinates are NOT
    clamped (out-of-range points map outside [0, 1]) and in_bounds flags
    rows whose four components all lie in [0, 1].
    """
    pts = np.atleast_2d(np.asarray(pts))
    lo = np.array([*bbox[0], time_range[0]], dtype=pts.dtype)
    hi = np.array([*bbox[1], time_range[1]], dtype=pts.dtype)
    coords = (pts - lo) / (hi - lo)
    in_bounds = np.all((coords >= 0.0) & (coords <= 1.0), axis=1)
    return coords, in_bounds


def _clamped(p_norm, width):
    p = np.atleast_2d(np.asarray(p_norm))
    if p.shape[1] != width:
        raise ValueError(f"expected coords of width {width}, got {p.shape}")
    return np.clip(p, 0.0, 1.0)


def query4d(pset, p_norm):
    """Concatenated bilinear lookup over all nine planes of a 4D set.

    p_norm: (N, 4) normalized coordinates (clamped to [0, 1]).  Returns
    (N, 9*C) features in the fixed PLANE_AXES_9 order.
    """
    out, _ = query4d_with_cache(pset, _clamped(p_norm, 4))
    return out


def query4d_with_cache(pset, p_clamped):
    outs, caches = [], []
    for plane in pset.planes:
        ia, ib = AXIS_INDEX[plane.axis_labels[0]], AXIS_INDEX[plane.axis_labels[1]]
        o, c = _sample_with_cache(plane, p_clamped[:, ia], p_clamped[:, ib])
        outs.append(o)
        caches.append(c)
    return np.concatenate(outs, axis=1), caches


def query4d_backward(pset, caches, upstream, d_coords=None):
    """Scatter upstream (N, 9*C) into plane grads; optionally accumulate
    d(output)/d(normalized coords) into d_coords (N, 4).

    Accumulation is additive and deterministic for a fixed batch order.
    """
    ch = pset.channels
    if upstream.shape[1] != 9 * ch:
        raise ValueError(f"upstream width {upstream.shape[1]} != {9 * ch}")
    want = d_coords is not None
    for k, plane in enumerate(pset.planes):
        pos = _scatter_backward(plane, caches[k],
                                upstream[:, k * ch:(k + 1) * ch], want)
        if want:
            ia, ib = AXIS_INDEX[plane.axis_labels[0]], AXIS_INDEX[plane.axis_labels[1]]
            d_coords[:, ia] += pos[0]
            d_coords[:, ib] += pos[1]


def query3d(pset, p_norm):
    """query4d restricted to the three spatial planes. p_norm: (N, 3)."""
    out, _ = query3d_with_cache(pset, _clamped(p_norm, 3))
    return out


def query3d_with_cache(pset, p_clamped):
    outs, caches = [], []
    for plane in pset.planes:
        ia, ib = AXIS_INDEX[plane.axis_labels[0]], AXIS_INDEX[plane.axis_labels[1]]
        o, c = _sample_with_cache(plane, p_clamped[:, ia], p_clamped[:, ib])
        outs.append(o)
        caches.append(c)
    return np.concatenate(outs, axis=1), caches


def query3d_backward(pset, caches, upstream, d_coords=None):
    ch = pset.channels
    if upstream.shape[1] != 3 * ch:
        raise ValueError(f"upstream width {upstream.shape[1]} != {3 * ch}")
    want = d_coords is not None
    for k, plane in enumerate(pset.planes):
        pos = _scatter_backward(plane, caches[k],
                                upstream[:, k * ch:(k + 1) * ch], want)
        if want:
            ia, ib = AXIS_INDEX[plane.axis_labels[0]], AXIS_INDEX[plane.axis_labels[1]]
            d_coords[:, ia] += pos[0]
            d_coords[:, ib] += pos[1]


TV_EPS = 1e-6  # smoothing inside the gradient's sqrt only


@njit(cache=True)
def _nb_tv(data, grad, weight, eps2, want_grad):
    nu, nv, ch = data.shape
    loss = 0.0
    for i in range(nu):
        for j in range(nv):
            for c in range(ch):
                x = data[i, j, c]
                a = data[i + 1, j, c] - x if i + 1 < nu else 0.0
                b = data[i, j + 1, c] - x if j + 1 < nv else 0.0
                sq = a * a + b * b
                loss += np.sqrt(sq)
                if want_grad:
                    r = np.sqrt(sq + eps2)
                    ga = weight * a / r
                    gb = weight * b / r
                    grad[i, j, c] -= ga + gb
                    if i + 1 < nu:
                        grad[i + 1, j, c] += ga
                    if j + 1 < nv:
                        grad[i, j + 1, c] += gb
    return loss


def tv_loss(plane, accumulate_grad=True, weight=1.0):
    """Total-variation penalty of one plane: sum over cells and channels of
    sqrt(du^2 + dv^2) of forward differences; cells missing a neighbor drop
    that term (one-sided boundaries).

    The returned value is unsmoothed (exactly 0 for a constant plane); the
    accumulated gradient uses sqrt(. + TV_EPS^2) smoothing so it is defined
    at zero difference.
    """
    data = plane.data
    nu, nv = plane.resolution_u, plane.resolution_v
    if nu < 2 or nv < 2:
        raise ValueError("tv_loss needs resolution >= 2 on both axes")
    if _HAVE_NUMBA:
        return float(_nb_tv(data, plane.grad, data.dtype.type(weight),
                            data.dtype.type(TV_EPS * TV_EPS),
                            bool(accumulate_grad)))
    a = np.zeros_like(data)
    b = np.zeros_like(data)
    a[:-1] = data[1:] - data[:-1]
    b[:, :-1] = data[:, 1:] - data[:, :-1]
    sq = a * a + b * b
    value = float(np.sum(np.sqrt(sq)))
    if accumulate_grad:
        r = np.sqrt(sq + TV_EPS * TV_EPS)
        ga = weight * (a / r)
        gb = weight * (b / r)
        g = -(ga + gb)
        g[1:] += ga[:-1]
        g[:, 1:] += gb[:, :-1]
        plane.grad += g
    return value
