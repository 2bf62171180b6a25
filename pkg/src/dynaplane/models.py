"""End-to-end model wirings over the factorized plane fields.

Two variants:

* Tensor4DMV - multi-view: a time-conditioned SDF field queried from two
  9-plane sets (coarse + fine), feeding a geometry head and a color head.
* Tensor4DMono - monocular: a 9-plane coarse flow field predicts a
  displacement that warps each observed point into a static canonical
  3-plane (x2 scales) SDF field; color is conditioned on the observed
  viewing direction.

Both expose the same surface the renderer consumes (sdf_feat / color plus
explicit backward passes) and a total_loss_* entry point combining the
color, plane-smoothness and eikonal terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .mlp import Mlp, PosEncoding, sigmoid
from .planes import (PlaneSet3, PlaneSet9, Tensor4DField, normalize_coords,
                     query3d_backward, query3d_with_cache, query4d_backward,
                     query4d_with_cache, tv_loss)
from .render import NeusScale, eikonal_loss, render_backward, render_rays


@dataclass
class Param:
    """A named view onto one trainable array and its gradient buffer.
    kind selects the optimizer group: plane-lr | plane-hr | mlp | scale."""

    name: str
    data: np.ndarray
    grad: np.ndarray
    kind: str


@dataclass
class ModelConfig:
    """Hyperparameters shared by both model variants (flow_* are ignored by
    the multi-view model)."""

    model_type: str = "mv"          # mv | mono
    n_lr: int = 128
    n_hr: int = 512
    channels: int = 8
    geo_hidden: int = 128
    geo_layers: int = 3
    geo_feat: int = 64
    color_hidden: int = 64
    color_layers: int = 2
    flow_hidden: int = 64
    flow_layers: int = 3
    enc_levels_xyzt: int = 6
    enc_levels_dir: int = 4
    activation: str = "softplus"    # hidden activation for all heads
    inv_s_init: float = 20.0
    sphere_prior: bool = True
    prior_radius: float = 0.5
    anchor_t0: bool = True          # mono: scale flow by normalized time
    color_loss: str = "l1"          # l1 | l2
    lambda_c: float = 1.0
    lambda_r: float = 0.01
    lambda_e: float = 0.1
    n_samples: int = 96
    background: tuple = (0.0, 0.0, 0.0)

    def validate(self):
        if self.model_type not in ("mv", "mono"):
            raise ValueError(f"unknown model_type {self.model_type!r}")
        if not self.n_lr < self.n_hr:
            raise ValueError("n_lr must be below n_hr")
        if self.color_loss not in ("l1", "l2"):
            raise ValueError(f"unknown color_loss {self.color_loss!r}")
        if self.activation not in ("softplus", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.lambda_c, self.lambda_r, self.lambda_e) < 0:
            raise ValueError("loss weights must be nonnegative")
        return self

    def to_dict(self):
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["background"] = tuple(d.get("background", (0.0, 0.0, 0.0)))
        return cls(**d).validate()


def color_loss_fn(pred, gt, kind):
    """Per-batch photometric loss and its gradient wrt the prediction.
    l1: mean absolute residual over all ray-channels (homogeneous deg. 1)."""
    resid = pred - gt
    n = resid.size
    if kind == "l1":
        return float(np.mean(np.abs(resid))), np.sign(resid) / n
    return float(np.mean(resid * resid)), 2.0 * resid / n


class _SdfAdapter:
    """Exposes a model's SDF path under the (sdf, sdf_backward) protocol the
    eikonal estimator expects."""

    def __init__(self, fwd, bwd):
        self._fwd = fwd
        self._bwd = bwd

    def sdf(self, pts):
        return self._fwd(pts)

    def sdf_backward(self, cache, d_sdf):
        return self._bwd(cache, d_sdf)


class _BaseModel:
    """Shared plumbing: color head, sphere prior, parameter enumeration."""

    def __init__(self, cfg, bbox, time_range, dtype):
        self.cfg = cfg
        self.bbox = (tuple(float(v) for v in bbox[0]),
                     tuple(float(v) for v in bbox[1]))
        self.time_range = (float(time_range[0]), float(time_range[1]))
        self.dtype = np.dtype(dtype).type
        self.hr_active = True
        lo = np.array(self.bbox[0])
        hi = np.array(self.bbox[1])
        self._center = ((lo + hi) / 2.0).astype(self.dtype)
        self.background = np.asarray(cfg.background, dtype=self.dtype)

    # -- sphere prior: analytic SDF offset so the field starts as a sphere
    def _prior(self, pts_xyz):
        d = pts_xyz - self._center
        r = np.sqrt(np.sum(d * d, axis=1) + 1e-20)
        return r - self.dtype(self.cfg.prior_radius), d / r[:, None]

    def color(self, feat, dirs):
        """feat (N, F) from the geometry head, dirs (N, 3) unit viewing
        directions -> rgb in [0, 1]^3 via logistic squashing."""
        g = self.enc_dir.encode(np.asarray(dirs, dtype=feat.dtype))
        x = np.concatenate([feat, g], axis=1)
        out, tape = self.color_mlp.forward(x, want_tape=True)
        rgb = sigmoid(out)
        return rgb, (tape, rgb)

    def color_backward(self, cache, d_rgb):
        tape, rgb = cache
        d_out = d_rgb * rgb * (1.0 - rgb)
        dx = self.color_mlp.backward(tape, d_out)
        return dx[:, :self.cfg.geo_feat]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def n_params(self):
        return sum(p.data.size for p in self.parameters())

    def _mlp_params(self, name, mlp):
        out = []
        for li, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            out.append(Param(f"{name}.w{li}", w, mlp.w_grads[li], "mlp"))
            out.append(Param(f"{name}.b{li}", b, mlp.b_grads[li], "mlp"))
        return out

    def eikonal_steps(self):
        """Half a fine-grid cell per spatial axis, in world units."""
        lo, hi = np.array(self.bbox[0]), np.array(self.bbox[1])
        n = self.cfg.n_hr
        return (0.5 * (hi - lo) / (n - 1)).astype(self.dtype)


class Tensor4DMV(_BaseModel):
    """Multi-view model: two-scale 9-plane field + geometry/color heads."""

    def __init__(self, cfg, bbox=((-1, -1, -1), (1, 1, 1)),
                 time_range=(0.0, 1.0), rng=None, dtype=np.float32):
        super().__init__(cfg.validate(), bbox, time_range, dtype)
        if rng is None:
            rng = np.random.default_rng(0)
        self.field = Tensor4DField.create(cfg.n_lr, cfg.n_hr, cfg.channels,
                                          self.bbox, self.time_range, rng,
                                          self.dtype)
        self.enc4 = PosEncoding(cfg.enc_levels_xyzt, include_input=True)
        self.enc_dir = PosEncoding(cfg.enc_levels_dir, include_input=True)
        geo_in = 2 * 9 * cfg.channels + self.enc4.out_dim(4)
        self.geo_mlp = Mlp([geo_in] + [cfg.geo_hidden] * cfg.geo_layers
                           + [1 + cfg.geo_feat], cfg.activation, rng, self.dtype,
                           out_scale=0.1)
        col_in = cfg.geo_feat + self.enc_dir.out_dim(3)
        self.color_mlp = Mlp([col_in] + [cfg.color_hidden] * cfg.color_layers
                             + [3], cfg.activation, rng, self.dtype,
                             zero_out_layer=True)
        self.scale = NeusScale.create(cfg.inv_s_init, self.dtype)

    def sdf_feat(self, pts4):
        """Field evaluation: concat(coarse 9-plane, fine 9-plane, encoded
        point) -> geometry head -> (sdf (N,), feat (N, F), cache)."""
        pts4 = np.asarray(pts4, dtype=self.dtype)
        coords, _ = normalize_coords(pts4, self.bbox, self.time_range)
        uc = np.clip(coords, 0.0, 1.0)
        m = (2.0 * uc - 1.0).astype(self.dtype)
        f_lr, lr_cache = query4d_with_cache(self.field.lr, uc)
        if self.hr_active:
            f_hr, hr_cache = query4d_with_cache(self.field.hr, uc)
        else:
            f_hr, hr_cache = np.zeros_like(f_lr), None
        g = self.enc4.encode(m)
        x = np.concatenate([f_lr, f_hr, g], axis=1)
        out, tape = self.geo_mlp.forward(x, want_tape=True)
        sdf = out[:, 0].copy()
        if self.cfg.sphere_prior:
            prior, _ = self._prior(pts4[:, :3])
            sdf += prior
        return sdf, out[:, 1:], (lr_cache, hr_cache, tape)

    def sdf_feat_backward(self, cache, d_sdf, d_feat):
        lr_cache, hr_cache, tape = cache
        up = np.concatenate([np.asarray(d_sdf).reshape(-1, 1), d_feat], axis=1)
        dx = self.geo_mlp.backward(tape, up)
        c9 = 9 * self.cfg.channels
        query4d_backward(self.field.lr, lr_cache, dx[:, :c9])
        if self.hr_active and hr_cache is not None:
            query4d_backward(self.field.hr, hr_cache, dx[:, c9:2 * c9])
        # positions are inputs, not parameters: encoding gradient is dropped

    def sdf_field(self):
        def fwd(pts):
            s, feat, cache = self.sdf_feat(pts)
            return s, (cache, feat.shape[1])

        def bwd(cache, d_sdf):
            inner, featdim = cache
            self.sdf_feat_backward(inner, d_sdf,
                                   np.zeros((len(d_sdf), featdim), self.dtype))
            return None

        return _SdfAdapter(fwd, bwd)

    def parameters(self):
        out = []
        for i, p in enumerate(self.field.lr.planes):
            out.append(Param(f"lr.{i}", p.data, p.grad, "plane-lr"))
        for i, p in enumerate(self.field.hr.planes):
            out.append(Param(f"hr.{i}", p.data, p.grad, "plane-hr"))
        out += self._mlp_params("geo", self.geo_mlp)
        out += self._mlp_params("color", self.color_mlp)
        out.append(Param("inv_s", self.scale.theta, self.scale.grad, "scale"))
        return out

    def regularized_planes(self):
        planes = list(self.field.lr.planes)
        if self.hr_active:
            planes += list(self.field.hr.planes)
        return planes


class Tensor4DMono(_BaseModel):
    """Monocular model: coarse 9-plane flow field warping points into a
    static two-scale 3-plane canonical SDF field."""

    def __init__(self, cfg, bbox=((-1, -1, -1), (1, 1, 1)),
                 time_range=(0.0, 1.0), rng=None, dtype=np.float32):
        super().__init__(cfg.validate(), bbox, time_range, dtype)
        if rng is None:
            rng = np.random.default_rng(0)
        c = cfg.channels
        self.flow_planes = PlaneSet9.create(cfg.n_lr, c, 1e-4, rng, self.dtype)
        self.canonical_lr = PlaneSet3.create(cfg.n_lr, c, 1e-4, rng, self.dtype)
        self.canonical_hr = PlaneSet3.create(cfg.n_hr, c, 0.0, rng, self.dtype)
        self.enc4 = PosEncoding(cfg.enc_levels_xyzt, include_input=True)
        self.enc3 = PosEncoding(cfg.enc_levels_xyzt, include_input=True)
        self.enc_dir = PosEncoding(cfg.enc_levels_dir, include_input=True)
        flow_in = 9 * c + self.enc4.out_dim(4)
        # zero output layer: the warp starts exactly at identity
        self.flow_mlp = Mlp([flow_in] + [cfg.flow_hidden] * cfg.flow_layers
                            + [3], cfg.activation, rng, self.dtype,
                            zero_out_layer=True)
        geo_in = 2 * 3 * c + self.enc3.out_dim(3)
        self.geo_mlp = Mlp([geo_in] + [cfg.geo_hidden] * cfg.geo_layers
                           + [1 + cfg.geo_feat], cfg.activation, rng, self.dtype,
                           out_scale=0.1)
        col_in = cfg.geo_feat + self.enc_dir.out_dim(3)
        self.color_mlp = Mlp([col_in] + [cfg.color_hidden] * cfg.color_layers
                             + [3], cfg.activation, rng, self.dtype,
                             zero_out_layer=True)
        self.scale = NeusScale.create(cfg.inv_s_init, self.dtype)

    # -- flow -------------------------------------------------------------
    def warp(self, pts4):
        """Observed 4D point -> canonical 3D point: p_hat = p + flow(p, t).
        With anchor_t0 the displacement is scaled by normalized time, so the
        warp is exactly the identity at t = t_min."""
        pts4 = np.asarray(pts4, dtype=self.dtype)
        coords, _ = normalize_coords(pts4, self.bbox, self.time_range)
        uc = np.clip(coords, 0.0, 1.0)
        m = (2.0 * uc - 1.0).astype(self.dtype)
        ff, fcache = query4d_with_cache(self.flow_planes, uc)
        g = self.enc4.encode(m)
        x = np.concatenate([ff, g], axis=1)
        draw, tape = self.flow_mlp.forward(x, want_tape=True)
        ramp = uc[:, 3:4].astype(self.dtype) if self.cfg.anchor_t0 else None
        delta = draw * ramp if ramp is not None else draw
        p_hat = pts4[:, :3] + delta
        return p_hat, (fcache, tape, ramp)

    def warp_backward(self, cache, d_phat):
        fcache, tape, ramp = cache
        d_draw = d_phat * ramp if ramp is not None else d_phat
        dx = self.flow_mlp.backward(tape, d_draw)
        query4d_backward(self.flow_planes, fcache, dx[:, :9 * self.cfg.channels])

    # -- canonical field ---------------------------------------------------
    def canonical(self, p_hat):
        """Static canonical SDF/feature lookup at warped 3D points (clamped
        to the bbox)."""
        p_hat = np.asarray(p_hat, dtype=self.dtype)
        lo = np.asarray(self.bbox[0], dtype=self.dtype)
        hi = np.asarray(self.bbox[1], dtype=self.dtype)
        u3 = (p_hat - lo) / (hi - lo)
        interior = ((u3 > 0.0) & (u3 < 1.0)).astype(self.dtype)
        uc3 = np.clip(u3, 0.0, 1.0)
        m3 = (2.0 * uc3 - 1.0).astype(self.dtype)
        f_l, cl = query3d_with_cache(self.canonical_lr, uc3)
        if self.hr_active:
            f_h, ch = query3d_with_cache(self.canonical_hr, uc3)
        else:
            f_h, ch = np.zeros_like(f_l), None
        g = self.enc3.encode(m3)
        x = np.concatenate([f_l, f_h, g], axis=1)
        out, tape = self.geo_mlp.forward(x, want_tape=True)
        sdf = out[:, 0].copy()
        prior_dir = None
        if self.cfg.sphere_prior:
            prior, prior_dir = self._prior(p_hat)
            sdf += prior
        return sdf, out[:, 1:], (cl, ch, tape, m3, interior, prior_dir, hi - lo)

    def canonical_backward(self, cache, d_sdf, d_feat):
        """Returns d(outputs)/d(p_hat) so the flow chain stays exact."""
        cl, ch, tape, m3, interior, prior_dir, extent = cache
        d_sdf = np.asarray(d_sdf).reshape(-1, 1)
        up = np.concatenate([d_sdf, d_feat], axis=1)
        dx = self.geo_mlp.backward(tape, up)
        c3 = 3 * self.cfg.channels
        d_uc = np.zeros_like(m3)
        query3d_backward(self.canonical_lr, cl, dx[:, :c3], d_coords=d_uc)
        if self.hr_active and ch is not None:
            query3d_backward(self.canonical_hr, ch, dx[:, c3:2 * c3],
                             d_coords=d_uc)
        d_uc += 2.0 * self.enc3.backward(m3, dx[:, 2 * c3:])
        d_phat = (d_uc * interior) / extent
        if prior_dir is not None:
            d_phat += d_sdf * prior_dir
        return d_phat

    # -- composed field ----------------------------------------------------
    def sdf_feat(self, pts4):
        p_hat, wcache = self.warp(pts4)
        sdf, feat, ccache = self.canonical(p_hat)
        return sdf, feat, (wcache, ccache)

    def sdf_feat_backward(self, cache, d_sdf, d_feat):
        wcache, ccache = cache
        d_phat = self.canonical_backward(ccache, d_sdf, d_feat)
        self.warp_backward(wcache, d_phat)

    def canonical_field(self):
        """Canonical-space SDF under the eikonal protocol; point gradients
        are returned so callers can chain through the warp."""
        def fwd(p3):
            s, feat, cache = self.canonical(p3)
            return s, (cache, feat.shape[1])

        def bwd(cache, d_sdf):
            inner, featdim = cache
            return self.canonical_backward(
                inner, d_sdf, np.zeros((len(d_sdf), featdim), self.dtype))

        return _SdfAdapter(fwd, bwd)

    def parameters(self):
        out = []
        for i, p in enumerate(self.flow_planes.planes):
            out.append(Param(f"flow.{i}", p.data, p.grad, "plane-lr"))
        for i, p in enumerate(self.canonical_lr.planes):
            out.append(Param(f"can_lr.{i}", p.data, p.grad, "plane-lr"))
        for i, p in enumerate(self.canonical_hr.planes):
            out.append(Param(f"can_hr.{i}", p.data, p.grad, "plane-hr"))
        out += self._mlp_params("flow_mlp", self.flow_mlp)
        out += self._mlp_params("geo", self.geo_mlp)
        out += self._mlp_params("color", self.color_mlp)
        out.append(Param("inv_s", self.scale.theta, self.scale.grad, "scale"))
        return out

    def regularized_planes(self):
        planes = list(self.flow_planes.planes) + list(self.canonical_lr.planes)
        if self.hr_active:
            planes += list(self.canonical_hr.planes)
        return planes


def build_model(cfg, bbox=((-1, -1, -1), (1, 1, 1)), time_range=(0.0, 1.0),
                rng=None, dtype=np.float32):
    cls = Tensor4DMV if cfg.model_type == "mv" else Tensor4DMono
    return cls(cfg, bbox, time_range, rng, dtype)


# ---------------------------------------------------------------------------
# total losses
# ---------------------------------------------------------------------------

def _loss_common(model, rays, gt_rgb, eik_pts, n_samples, stratified, seed,
                 accumulate):
    cfg = model.cfg
    batch = render_rays(model, rays, n_samples, stratified, seed,
                        model.background)
    l_c, d_rgb = color_loss_fn(batch.rgb, np.asarray(gt_rgb, model.dtype),
                               cfg.color_loss)
    if accumulate and cfg.lambda_c > 0:
        render_backward(model, batch, cfg.lambda_c * d_rgb)

    l_r = 0.0
    if cfg.lambda_r > 0 or not accumulate:
        for plane in model.regularized_planes():
            l_r += tv_loss(plane, accumulate_grad=accumulate and cfg.lambda_r > 0,
                           weight=cfg.lambda_r)
    return batch, l_c, l_r


def total_loss_mv(model, rays, gt_rgb, eik_pts, n_samples=None,
                  stratified=False, seed=0, accumulate=True):
    """Weighted multi-view objective: color + plane TV + eikonal.  Returns
    (total, breakdown); parameter gradients of the weighted sum are
    accumulated unless accumulate=False."""
    cfg = model.cfg
    n_samples = n_samples or cfg.n_samples
    batch, l_c, l_r = _loss_common(model, rays, gt_rgb, eik_pts, n_samples,
                                   stratified, seed, accumulate)
    l_e = 0.0
    if eik_pts is not None and len(eik_pts):
        l_e, _ = eikonal_loss(model.sdf_field(),
                              np.asarray(eik_pts, model.dtype),
                              model.eikonal_steps(),
                              accumulate_grad=accumulate and cfg.lambda_e > 0,
                              weight=cfg.lambda_e)
    total = cfg.lambda_c * l_c + cfg.lambda_r * l_r + cfg.lambda_e * l_e
    return total, {"l_c": l_c, "l_r": l_r, "l_e": l_e, "batch": batch}


def total_loss_mono(model, rays, gt_rgb, eik_pts, n_samples=None,
                    stratified=False, seed=0, accumulate=True):
    """Monocular objective; the eikonal term is evaluated on the canonical
    SDF at warped sample points, with gradients flowing back through the
    warp."""
    cfg = model.cfg
    n_samples = n_samples or cfg.n_samples
    batch, l_c, l_r = _loss_common(model, rays, gt_rgb, eik_pts, n_samples,
                                   stratified, seed, accumulate)
    l_e = 0.0
    if eik_pts is not None and len(eik_pts):
        eik_pts = np.asarray(eik_pts, model.dtype)
        want_grad = accumulate and cfg.lambda_e > 0
        p_hat, wcache = model.warp(eik_pts)
        l_e, d_phat = eikonal_loss(model.canonical_field(), p_hat,
                                   model.eikonal_steps(),
                                   accumulate_grad=want_grad,
                                   want_dpts=want_grad,
                                   weight=cfg.lambda_e)
        if want_grad:
            model.warp_backward(wcache, d_phat.astype(model.dtype))
    total = cfg.lambda_c * l_c + cfg.lambda_r * l_r + cfg.lambda_e * l_e
    return total, {"l_c": l_c, "l_r": l_r, "l_e": l_e, "batch": batch}


def total_loss(model, *args, **kw):
    if isinstance(model, Tensor4DMono):
        return total_loss_mono(model, *args, **kw)
    return total_loss_mv(model, *args, **kw)
