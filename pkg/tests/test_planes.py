"""Plane storage, bilinear querying, scatter gradients and TV regularizer."""

import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from dynaplane.planes import (AXIS_INDEX, PLANE_AXES_9, FeaturePlane,
                              InvalidInputError, PlaneSet3, PlaneSet9,
                              Tensor4DField, bilinear_sample, normalize_coords,
                              query3d, query3d_backward, query3d_with_cache,
                              query4d, query4d_backward, query4d_with_cache,
                              tv_loss)


def make_plane(data, axes=("x", "y")):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    return FeaturePlane(data.shape[0], data.shape[1], data.shape[2], axes, data)


def bilinear_oracle(data, u, v):
    """Scalar align-corners bilinear reference, straight from the formula."""
    nu, nv = data.shape[0], data.shape[1]
    gu, gv = u * (nu - 1), v * (nv - 1)
    i0 = min(int(np.floor(gu)), max(nu - 2, 0))
    j0 = min(int(np.floor(gv)), max(nv - 2, 0))
    fu, fv = gu - i0, gv - j0
    i1, j1 = min(i0 + 1, nu - 1), min(j0 + 1, nv - 1)
    return ((1 - fu) * (1 - fv) * data[i0, j0] + fu * (1 - fv) * data[i1, j0]
            + (1 - fu) * fv * data[i0, j1] + fu * fv * data[i1, j1])


# ---------------------------------------------------------------------------
# bilinear_sample
# ---------------------------------------------------------------------------

def test_bilinear_constant_field():
    plane = make_plane(np.tile([[5.0, -1.0]], (3, 3, 1)).reshape(3, 3, 2))
    out = bilinear_sample(plane, 0.3, 0.7)
    np.testing.assert_allclose(out, [5.0, -1.0], rtol=0, atol=1e-15)


def test_bilinear_2x2_center_average():
    plane = make_plane([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear_sample(plane, 0.5, 0.5)[0] == pytest.approx(1.5, abs=1e-15)


def test_bilinear_corner_and_cell_center_identity(rng):
    data = rng.normal(size=(4, 5, 3))
    plane = make_plane(data)
    np.testing.assert_array_equal(bilinear_sample(plane, 0.0, 0.0), data[0, 0])
    for i in range(4):
        for j in range(5):
            out = bilinear_sample(plane, i / 3.0, j / 4.0)
            np.testing.assert_allclose(out, data[i, j], rtol=0, atol=1e-12)


def test_bilinear_clamps_out_of_range(rng):
    plane = make_plane(rng.normal(size=(3, 3, 1)))
    np.testing.assert_array_equal(bilinear_sample(plane, -0.5, 2.0),
                                  bilinear_sample(plane, 0.0, 1.0))


def test_bilinear_nonfinite_rejected():
    plane = make_plane(np.zeros((2, 2, 1)))
    with pytest.raises(InvalidInputError):
        bilinear_sample(plane, np.nan, 0.5)
    with pytest.raises(InvalidInputError):
        bilinear_sample(plane, 0.5, np.inf)


def test_bilinear_matches_oracle(rng):
    data = rng.normal(size=(4, 4, 2))
    plane = make_plane(data)
    for _ in range(100):
        u, v = rng.uniform(0, 1, 2)
        out = bilinear_sample(plane, u, v)
        ref = bilinear_oracle(data, u, v)
        np.testing.assert_allclose(out, ref, rtol=1e-12)


# ---------------------------------------------------------------------------
# normalize_coords
# ---------------------------------------------------------------------------

BBOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def test_normalize_min_corner():
    c, inb = normalize_coords([-1, -1, -1, 0.0], BBOX, (0.0, 10.0))
    np.testing.assert_array_equal(c[0], [0, 0, 0, 0])
    assert inb[0]


def test_normalize_center():
    c, _ = normalize_coords([0, 0, 0, 5.0], BBOX, (0.0, 10.0))
    np.testing.assert_allclose(c[0], [0.5] * 4)


def test_normalize_affine_example():
    c, inb = normalize_coords([0.5, -1, 1, 2.5], BBOX, (0.0, 10.0))
    np.testing.assert_allclose(c[0], [0.75, 0.0, 1.0, 0.25])
    assert inb[0]


def test_normalize_flags_out_of_bounds():
    c, inb = normalize_coords([[2.0, 0, 0, 5.0], [0, 0, 0, 5.0]], BBOX, (0, 10))
    assert c[0, 0] == pytest.approx(1.5)
    assert not inb[0] and inb[1]


# ---------------------------------------------------------------------------
# query4d / query3d
# ---------------------------------------------------------------------------

def test_query4d_zero_planes():
    pset = PlaneSet9.create(4, 2, dtype=np.float64)
    out = query4d(pset, np.array([[0.3, 0.4, 0.5, 0.6]]))
    assert out.shape == (1, 18)
    np.testing.assert_array_equal(out, 0.0)


def test_query4d_constant_planes_concat_order(rng):
    pset = PlaneSet9.create(4, 2, dtype=np.float64)
    consts = [rng.normal(size=2) for _ in range(9)]
    for plane, c in zip(pset.planes, consts):
        plane.data[...] = c
    out = query4d(pset, rng.uniform(0, 1, (5, 4)))
    expected = np.concatenate(consts)
    np.testing.assert_allclose(out, np.tile(expected, (5, 1)), rtol=1e-12)


def test_query4d_separable_oracle(rng):
    """Planes programmed with g_ab(a, b) on cell centers reproduce the
    per-plane brute-force evaluation at arbitrary query points."""
    n, ch = 5, 1
    pset = PlaneSet9.create(n, ch, dtype=np.float64)
    coeffs = rng.normal(size=(9, 2))
    grid = np.linspace(0, 1, n)
    for k, plane in enumerate(pset.planes):
        a, b = np.meshgrid(grid, grid, indexing="ij")
        plane.data[...] = (coeffs[k, 0] * a + coeffs[k, 1] * b)[:, :, None]
    pts = rng.uniform(0, 1, (20, 4))
    out = query4d(pset, pts)
    for k, plane in enumerate(pset.planes):
        ia, ib = AXIS_INDEX[plane.axis_labels[0]], AXIS_INDEX[plane.axis_labels[1]]
        ref = [bilinear_oracle(plane.data, pts[i, ia], pts[i, ib])[0]
               for i in range(len(pts))]
        np.testing.assert_allclose(out[:, k], ref, rtol=1e-12)
        # bilinear interp of a plane that *is* affine reproduces it exactly
        np.testing.assert_allclose(out[:, k],
                                   coeffs[k, 0] * pts[:, ia] + coeffs[k, 1] * pts[:, ib],
                                   rtol=1e-12)


def test_query3d_matches_scalar_oracle(rng):
    pset = PlaneSet3.create(4, 2, dtype=np.float64)
    for plane in pset.planes:
        plane.data[...] = rng.normal(size=plane.data.shape)
    pts = rng.uniform(0, 1, (100, 3))
    out = query3d(pset, pts)
    for k, plane in enumerate(pset.planes):
        ia, ib = AXIS_INDEX[plane.axis_labels[0]], AXIS_INDEX[plane.axis_labels[1]]
        ref = np.array([bilinear_oracle(plane.data, pts[i, ia], pts[i, ib])
                        for i in range(len(pts))])
        np.testing.assert_allclose(out[:, 2 * k:2 * k + 2], ref, rtol=1e-12)


def test_query4d_piecewise_bilinear_collinear(rng):
    """Inside one grid cell the output is affine along each axis: three
    collinear samples on an axis-parallel segment stay collinear."""
    pset = PlaneSet9.create(4, 2, dtype=np.float64)
    for plane in pset.planes:
        plane.data[...] = rng.normal(size=plane.data.shape)
    base = rng.uniform(0.02, 0.30, 4)  # inside the first cell (width 1/3)
    for axis in range(4):
        pts = np.tile(base, (3, 1))
        pts[:, axis] = [0.05, 0.15, 0.25]
        out = query4d(pset, pts)
        np.testing.assert_allclose(out[1], 0.5 * (out[0] + out[2]),
                                   rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# scatter backward
# ---------------------------------------------------------------------------

def test_query4d_backward_zero_upstream(rng):
    pset = PlaneSet9.create(4, 2, dtype=np.float64)
    pts = np.clip(rng.uniform(0, 1, (3, 4)), 0, 1)
    _, caches = query4d_with_cache(pset, pts)
    query4d_backward(pset, caches, np.zeros((3, 18)))
    for plane in pset.planes:
        np.testing.assert_array_equal(plane.grad, 0.0)


def test_query4d_backward_cell_center_full_deposit():
    pset = PlaneSet9.create(4, 1, dtype=np.float64)
    pts = np.tile([1 / 3, 2 / 3, 0.0, 1.0], (1, 1))  # exact cell centers
    _, caches = query4d_with_cache(pset, pts)
    up = np.arange(1.0, 10.0)[None, :]
    query4d_backward(pset, caches, up)
    for k, plane in enumerate(pset.planes):
        nz = np.nonzero(plane.grad)
        assert len(nz[0]) == 1
        assert plane.grad[nz][0] == pytest.approx(up[0, k])
        ia, ib = AXIS_INDEX[plane.axis_labels[0]], AXIS_INDEX[plane.axis_labels[1]]
        assert nz[0][0] == round(pts[0, ia] * 3) and nz[1][0] == round(pts[0, ib] * 3)


def test_query4d_backward_matches_finite_differences(rng):
    """>= 100 point instances, eps=1e-4 fp64, rel err < 1e-6 against FD of
    the touched cells."""
    pset = PlaneSet9.create(4, 2, dtype=np.float64)
    for plane in pset.planes:
        plane.data[...] = rng.normal(size=plane.data.shape)
    for trial in range(100):
        pts = rng.uniform(0.05, 0.95, (1, 4))
        up = rng.normal(size=(1, 18))
        pset.zero_grad()
        _, caches = query4d_with_cache(pset, pts)
        query4d_backward(pset, caches, up)
        plane = pset.planes[trial % 9]
        k = trial % 9
        touched = np.argwhere(plane.grad != 0)
        assert 1 <= len(touched) <= 4 * 2  # four cells, two channels

        def f():
            return float(np.sum(query4d(pset, pts)[:, 2 * k:2 * k + 2] * up[:, 2 * k:2 * k + 2]))

        for (i, j, c) in touched[:2]:
            sub = plane.data[i:i + 1, j:j + 1, c:c + 1]
            fd = numeric_grad(f, sub, eps=1e-4)[0, 0, 0]
            assert rel_err(plane.grad[i, j, c], fd) < 1e-6


def test_query_position_gradients_match_fd(rng):
    pset = PlaneSet3.create(5, 2, dtype=np.float64)
    for plane in pset.planes:
        plane.data[...] = rng.normal(size=plane.data.shape)
    for _ in range(100):
        pts = rng.uniform(0.06, 0.94, (1, 3))
        # keep away from cell boundaries (multiples of 1/4)
        pts = np.where(np.abs(pts * 4 - np.round(pts * 4)) < 0.08,
                       pts + 0.05, pts)
        up = rng.normal(size=(1, 6))
        pset.zero_grad()
        _, caches = query3d_with_cache(pset, pts)
        d_pos = np.zeros((1, 3))
        query3d_backward(pset, caches, up, d_coords=d_pos)

        def f():
            return float(np.sum(query3d(pset, pts) * up))

        fd = numeric_grad(f, pts, eps=1e-6)
        assert rel_err(d_pos, fd) < 1e-5


# ---------------------------------------------------------------------------
# tv_loss
# ---------------------------------------------------------------------------

def test_tv_constant_plane_zero():
    plane = make_plane(np.full((5, 5), 3.7))
    assert tv_loss(plane, accumulate_grad=False) == 0.0


def test_tv_2x2_example():
    plane = make_plane([[0.0, 1.0], [0.0, 1.0]])
    # one-sided boundaries: (0,0) -> sqrt(0+1), (0,1) -> sqrt(0), (1,0) -> 1,
    # (1,1) -> nothing: total 2
    assert tv_loss(plane, accumulate_grad=False) == pytest.approx(2.0, abs=1e-12)


def test_tv_nonnegative_and_zero_iff_constant(rng):
    for _ in range(20):
        plane = make_plane(rng.normal(size=(4, 4, 2)))
        v = tv_loss(plane, accumulate_grad=False)
        assert v >= 0.0
        assert v > 1e-5  # random planes are not constant
    assert tv_loss(make_plane(np.zeros((4, 4))), accumulate_grad=False) <= 1e-5


def test_tv_gradient_matches_fd(rng):
    for _ in range(25):
        data = rng.normal(size=(4, 4, 2))
        while (min(np.abs(np.diff(data, axis=0)).min(),
                   np.abs(np.diff(data, axis=1)).min()) < 1e-3):
            # keep cell differences away from the 1e-6 smoothing scale,
            # where the smoothed gradient intentionally departs from the
            # unsmoothed subgradient
            data = rng.normal(size=(4, 4, 2))
        plane = make_plane(data)
        plane.zero_grad()
        tv_loss(plane, accumulate_grad=True)

        def f():
            return tv_loss(plane, accumulate_grad=False)

        fd = numeric_grad(f, plane.data, eps=1e-6)
        # floor absorbs the 1e-6-smoothing of exactly-cancelling subgradients
        assert rel_err(plane.grad, fd, floor=1e-4) < 1e-5


def test_tv_requires_min_resolution():
    with pytest.raises(ValueError):
        tv_loss(make_plane(np.zeros((1, 4))))


# ---------------------------------------------------------------------------
# set/field structure
# ---------------------------------------------------------------------------

def test_planeset9_axis_contract():
    pset = PlaneSet9.create(4, 2)
    assert tuple(p.axis_labels for p in pset.planes) == PLANE_AXES_9
    # the paired spatio-temporal planes are distinct parameter buffers
    assert pset.planes[1].data is not pset.planes[4].data


def test_planeset9_param_count_quadratic():
    for n, c in [(4, 2), (8, 2), (128, 8)]:
        assert PlaneSet9.create(n, c).n_params == 9 * n * n * c
    assert PlaneSet9.create(8, 3).n_params == 4 * PlaneSet9.create(4, 3).n_params


def test_planeset_validation_errors():
    good = PlaneSet9.create(4, 2)
    with pytest.raises(ValueError):
        PlaneSet9(good.planes[:8])
    with pytest.raises(ValueError):
        PlaneSet3(good.planes[:3])  # wrong axis labels
    with pytest.raises(ValueError):
        FeaturePlane(2, 2, 1, ("x", "x"), np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        FeaturePlane(2, 2, 1, ("x", "y"), np.full((2, 2, 1), np.nan))


def test_numba_and_numpy_backends_agree(rng):
    """The jitted gather/scatter kernels match the pure-numpy fallback."""
    import json
    import subprocess
    import sys

    script = r"""
import json, sys
import numpy as np
from dynaplane.planes import PlaneSet9, query4d_with_cache, query4d_backward
rng = np.random.default_rng(77)
pset = PlaneSet9.create(5, 2, dtype=np.float64)
for p in pset.planes:
    p.data[...] = rng.normal(size=p.data.shape)
pts = rng.uniform(0, 1, (40, 4))
out, caches = query4d_with_cache(pset, pts)
up = rng.normal(size=out.shape)
d_pos = np.zeros((40, 4))
query4d_backward(pset, caches, up, d_coords=d_pos)
print(json.dumps({
    "out": out.sum(axis=0).tolist(),
    "grad": [float(p.grad.sum()) for p in pset.planes],
    "dpos": d_pos.sum(axis=0).tolist(),
}))
"""
    def run(env_extra):
        import os
        env = dict(os.environ, **env_extra)
        res = subprocess.run([sys.executable, "-c", script], env=env,
                             capture_output=True, text=True, check=True)
        return json.loads(res.stdout)

    with_numba = run({})
    without = run({"DYNAPLANE_NO_NUMBA": "1"})
    for key in ("out", "grad", "dpos"):
        np.testing.assert_allclose(with_numba[key], without[key],
                                   rtol=1e-12, atol=1e-12)


def test_field_invariants():
    with pytest.raises(ValueError):
        Tensor4DField.create(n_lr=8, n_hr=8)
    with pytest.raises(ValueError):
        Tensor4DField.create(n_lr=4, n_hr=8, bbox=((1, -1, -1), (1, 1, 1)))
    with pytest.raises(ValueError):
        Tensor4DField.create(n_lr=4, n_hr=8, time_range=(1.0, 1.0))
    fld = Tensor4DField.create(n_lr=4, n_hr=8, channels=2)
    assert fld.hr.resolution == 8
    # fine planes start exactly zero: enabling them is continuous
    for p in fld.hr.planes:
        np.testing.assert_array_equal(p.data, 0.0)
