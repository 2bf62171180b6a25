"""Analytic dynamic scenes and dataset generation.

Each scene is a closed-form time-varying SDF (1-Lipschitz by construction)
plus a procedural albedo attached to the object frame.  Ground truth is
rendered by sphere tracing with headlight Lambert shading, so appearance is
view-dependent.  Datasets are written as 8-bit PNGs plus a JSON manifest
holding intrinsics, world-from-camera matrices, timestamps and split tags.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .render import Camera, generate_rays, camera_pixel_grid

DEFAULT_BBOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


@dataclass
class AnalyticScene:
    """Closed-form dynamic scene: sdf(p, t) and albedo(p, t) vectorized over
    point arrays (N, 3) with scalar t."""

    name: str
    sdf: callable
    albedo: callable
    bbox: tuple = DEFAULT_BBOX
    time_range: tuple = (0.0, 1.0)


def _checker(p, cell, color_a, color_b):
    ids = np.floor(p / cell).astype(np.int64).sum(axis=1)
    sel = (ids % 2 == 0)[:, None]
    return np.where(sel, color_a, color_b)


def _stripes(p, period, axis, color_a, color_b):
    sel = (np.sin(2.0 * np.pi * p[:, axis] / period) > 0)[:, None]
    return np.where(sel, color_a, color_b)


def _sphere_sdf(p, center, radius):
    return np.linalg.norm(p - center, axis=1) - radius


def _box_sdf(p, half):
    q = np.abs(p) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside


def translating_sphere_scene():
    """Checker-textured sphere translating along x."""
    r = 0.45
    a = np.array([0.85, 0.35, 0.30])
    b = np.array([0.25, 0.50, 0.85])

    def center(t):
        return np.array([-0.3 + 0.6 * t, 0.0, 0.0])

    def sdf(p, t):
        return _sphere_sdf(p, center(t), r)

    def albedo(p, t):
        return _checker(p - center(t), 0.22, a, b)

    return AnalyticScene("translating_sphere", sdf, albedo)


def striped_sphere_scene(period=0.08):
    """Finely striped sphere translating along x; the stripe period sits
    between the coarse and fine plane resolutions so the fine scale has
    detail to add."""
    r = 0.45
    a = np.array([0.92, 0.88, 0.25])
    b = np.array([0.20, 0.25, 0.60])

    def center(t):
        return np.array([-0.25 + 0.5 * t, 0.0, 0.0])

    def sdf(p, t):
        return _sphere_sdf(p, center(t), r)

    def albedo(p, t):
        return _stripes(p - center(t), period, 1, a, b)

    return AnalyticScene("striped_sphere", sdf, albedo)


def two_spheres_scene():
    """Two spheres that approach, merge, and split again: the silhouette
    changes connectivity over time."""
    r = 0.28
    a = np.array([0.85, 0.30, 0.25])
    b = np.array([0.25, 0.45, 0.85])

    def offset(t):
        return 0.14 + 0.36 * abs(2.0 * t - 1.0)

    def sdf(p, t):
        d = offset(t)
        s1 = _sphere_sdf(p, np.array([-d, 0.0, 0.0]), r)
        s2 = _sphere_sdf(p, np.array([d, 0.0, 0.0]), r)
        return np.minimum(s1, s2)

    def albedo(p, t):
        d = offset(t)
        s1 = _sphere_sdf(p, np.array([-d, 0.0, 0.0]), r)
        s2 = _sphere_sdf(p, np.array([d, 0.0, 0.0]), r)
        return np.where((s1 <= s2)[:, None], a, b)

    return AnalyticScene("two_spheres", sdf, albedo)


def rotating_box_scene():
    """Checkered box spinning about the y axis (rigid rotation keeps the
    SDF 1-Lipschitz)."""
    half = (0.42, 0.26, 0.26)
    a = np.array([0.80, 0.70, 0.30])
    b = np.array([0.30, 0.30, 0.35])

    def rot(t):
        th = 0.5 * np.pi * t
        c, s = np.cos(th), np.sin(th)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    def to_obj(p, t):
        return p @ rot(t)  # world->object: multiply by R (inverse of R.T)

    def sdf(p, t):
        return _box_sdf(to_obj(p, t), half)

    def albedo(p, t):
        return _checker(to_obj(p, t), 0.2, a, b)

    return AnalyticScene("rotating_box", sdf, albedo)


SCENES = {
    "translating_sphere": translating_sphere_scene,
    "striped_sphere": striped_sphere_scene,
    "two_spheres": two_spheres_scene,
    "rotating_box": rotating_box_scene,
}


def make_scene(name):
    if name not in SCENES:
        raise ValueError(f"unknown scene {name!r}; available: "
                         + ", ".join(sorted(SCENES)))
    return SCENES[name]()


# ---------------------------------------------------------------------------
# camera rigs
# ---------------------------------------------------------------------------

def _orbit_camera(azim_deg, elev_deg, radius, look_at, intr, t=0.0):
    azim = np.deg2rad(azim_deg)
    elev = np.deg2rad(elev_deg)
    look_at = np.asarray(look_at, dtype=np.float64)
    eye = look_at + radius * np.array([np.cos(elev) * np.sin(azim),
                                       np.sin(elev),
                                       np.cos(elev) * np.cos(azim)])
    return Camera.look_at(eye=eye, target=look_at, t=t, **intr)


def default_intrinsics(resolution=96, focal_factor=1.35):
    w = h = int(resolution)
    return dict(fx=focal_factor * w, fy=focal_factor * w,
                cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h)


def make_rig(kind, k, radius=2.9, look_at=(0.0, 0.0, 0.0), resolution=96,
             focal_factor=1.35):
    """Camera rigs: 'forward_sparse' spreads k cameras over a frontal +-30
    degree arc (alternating slight elevation), 'ring' spaces k cameras
    evenly around the full circle, 'monocular_orbit' yields one camera per
    frame advancing around the ring."""
    if k < 1:
        raise ValueError("rig needs at least one camera")
    intr = default_intrinsics(resolution, focal_factor)
    cams = []
    if kind == "forward_sparse":
        azims = np.linspace(-30.0, 30.0, k) if k > 1 else np.array([0.0])
        for i, az in enumerate(azims):
            elev = 10.0 if i % 2 == 0 else -10.0
            cams.append(_orbit_camera(az, elev, radius, look_at, intr))
    elif kind == "ring":
        for i in range(k):
            cams.append(_orbit_camera(360.0 * i / k, 0.0, radius, look_at, intr))
    elif kind == "monocular_orbit":
        for i in range(k):
            cams.append(_orbit_camera(360.0 * i / k, 20.0, radius, look_at, intr))
    else:
        raise ValueError(f"unknown rig kind {kind!r}")
    return cams


# ---------------------------------------------------------------------------
# ground-truth rendering (sphere tracing)
# ---------------------------------------------------------------------------

def sphere_trace(scene, origins, dirs, t, max_steps=256, tol=3e-4, far=8.0):
    """March each ray through the analytic SDF.  Returns (hit mask, hit
    points, n_nonconverged): rays still active after max_steps are treated
    as misses and counted."""
    n = len(origins)
    depth = np.full(n, 1e-4)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        p = origins[active] + dirs[active] * depth[active, None]
        s = scene.sdf(p, t)
        newly_hit = s < tol
        idx = np.nonzero(active)[0]
        hit[idx[newly_hit]] = True
        depth[active] += np.maximum(s, 0.0)
        escaped = depth[idx] > far
        active[idx] = ~(newly_hit | escaped)
    n_nonconverged = int(active.sum())
    pts = origins + dirs * depth[:, None]
    return hit, pts, n_nonconverged


def _fd_normals(scene, p, t, h=5e-4):
    g = np.empty_like(p)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[:, a] = scene.sdf(p + e, t) - scene.sdf(p - e, t)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.maximum(norm, 1e-12)


def render_ground_truth(scene, cam, background=(0.0, 0.0, 0.0),
                        ambient=0.25, want_mask=False):
    """Sphere-traced render with headlight Lambert shading.  Pixels whose
    ray misses (or whose trace fails to converge) get the background."""
    px = camera_pixel_grid(cam)
    origins, dirs = generate_rays(cam, px)
    hit, pts, n_bad = sphere_trace(scene, origins, dirs, cam.t)
    img = np.tile(np.asarray(background, dtype=np.float64), (len(px), 1))
    if hit.any():
        normals = _fd_normals(scene, pts[hit], cam.t)
        lambert = np.maximum(0.0, -np.sum(normals * dirs[hit], axis=1))
        shade = ambient + (1.0 - ambient) * lambert
        img[hit] = scene.albedo(pts[hit], cam.t) * shade[:, None]
    img = np.clip(img.reshape(cam.height, cam.width, 3), 0.0, 1.0)
    if want_mask:
        return img, hit.reshape(cam.height, cam.width), n_bad
    return img


def silhouette_components(mask, min_pixels=8):
    """Count connected components of a boolean silhouette, ignoring specks
    smaller than min_pixels (4-connectivity)."""
    from scipy import ndimage
    labels, n = ndimage.label(mask)
    if n == 0:
        return 0
    sizes = np.bincount(labels.ravel())[1:]
    return int(np.sum(sizes >= min_pixels))


# ---------------------------------------------------------------------------
# dataset serialization
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class FrameRecord:
    camera: Camera
    image: str   # path relative to the dataset root
    split: str   # train | holdout

    @property
    def t(self):
        return self.camera.t


@dataclass
class SceneDataset:
    root: str
    bbox: tuple
    time_range: tuple
    background: tuple
    frames: list

    def __len__(self):
        return len(self.frames)

    def split(self, tag):
        return [f for f in self.frames if f.split == tag]

    def views(self):
        """Frames grouped by unique camera pose, in first-appearance order."""
        order, groups = [], {}
        for i, fr in enumerate(self.frames):
            key = (fr.camera.c2w.tobytes(), fr.camera.fx, fr.camera.fy,
                   fr.camera.cx, fr.camera.cy)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(i)
        return [groups[k] for k in order]

    def load_image(self, idx):
        path = os.path.join(self.root, self.frames[idx].image)
        arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
        return arr[:, :, :3]


def save_png(path, img):
    """img: float (H, W, 3) in [0, 1] -> 8-bit RGB file."""
    data = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, "RGB").save(path)


class DatasetError(RuntimeError):
    pass


def export_dataset(scene, cameras, n_frames, out_dir, background=(0, 0, 0),
                   holdout_views=(), monocular=False):
    """Render and write a dataset.

    Multi-view: every camera captures every frame time; cameras whose index
    is listed in holdout_views are tagged 'holdout'.  Monocular: camera i
    captures only frame i (len(cameras) must equal n_frames).
    """
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    t0, t1 = scene.time_range
    times = np.linspace(t0, t1, n_frames)
    entries = []
    if monocular and len(cameras) != n_frames:
        raise ValueError("monocular export needs one camera per frame")
    pairs = ([(i, i) for i in range(n_frames)] if monocular else
             [(ci, fi) for ci in range(len(cameras)) for fi in range(n_frames)])
    for ci, fi in pairs:
        cam = cameras[ci]
        cam = Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                     cam.c2w.copy(), t=float(times[fi]))
        img = render_ground_truth(scene, cam, background)
        rel = f"frames/cam{ci:02d}_f{fi:03d}.png"
        save_png(os.path.join(out_dir, rel), img)
        split = "holdout" if ci in holdout_views else "train"
        entries.append({
            "image": rel,
            "width": cam.width, "height": cam.height,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "c2w": [float(v) for v in np.asarray(cam.c2w, np.float32).ravel()],
            "t": float(np.float32(cam.t)),
            "split": split,
        })
    manifest = {
        "version": MANIFEST_VERSION,
        "bbox": {"min": list(scene.bbox[0]), "max": list(scene.bbox[1])},
        "time_range": list(scene.time_range),
        "background_rgb": [float(v) for v in background],
        "frames": entries,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return import_dataset(out_dir)


def import_dataset(root):
    """Load and validate a dataset directory; raises DatasetError with the
    offending frame on any inconsistency."""
    mpath = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(mpath):
        raise DatasetError(f"missing {MANIFEST_NAME} in {root}")
    try:
        with open(mpath) as fh:
            m = json.load(fh)
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {mpath}: {e}") from e
    for key in ("version", "bbox", "time_range", "background_rgb", "frames"):
        if key not in m:
            raise DatasetError(f"manifest missing field {key!r}")
    bbox = (tuple(m["bbox"]["min"]), tuple(m["bbox"]["max"]))
    t0, t1 = m["time_range"]
    frames = []
    for k, e in enumerate(m["frames"]):
        for key in ("image", "width", "height", "fx", "fy", "cx", "cy",
                    "c2w", "t", "split"):
            if key not in e:
                raise DatasetError(f"frame {k} missing field {key!r}")
        path = os.path.join(root, e["image"])
        if not os.path.exists(path):
            raise DatasetError(f"frame {k}: missing image {e['image']}")
        with Image.open(path) as im:
            if im.size != (e["width"], e["height"]):
                raise DatasetError(
                    f"frame {k}: image {e['image']} is {im.size}, expected "
                    f"{(e['width'], e['height'])}")
        if not (t0 <= e["t"] <= t1):
            raise DatasetError(f"frame {k}: timestamp {e['t']} outside "
                               f"time_range {m['time_range']}")
        c2w = np.asarray(e["c2w"], dtype=np.float64).reshape(3, 4)
        cam = Camera(e["fx"], e["fy"], e["cx"], e["cy"], e["width"],
                     e["height"], c2w, t=float(e["t"]))
        frames.append(FrameRecord(cam, e["image"], e["split"]))
    return SceneDataset(root, bbox, (float(t0), float(t1)),
                        tuple(m["background_rgb"]), frames)
