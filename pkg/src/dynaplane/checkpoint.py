"""Binary checkpoint container.

Layout (all little-endian):
  magic "T4D1", version u32,
  header u32 length + UTF-8 JSON (model config echo, bbox, time range,
    iteration, RNG state, adam hyperparameters),
  plane segments in canonical model order (axis labels as u8 indices into
    "xyzt", resolution_u/v u32, channels u32, row-major fp32 payload),
  one MLP segment per head (u32 layer count, u32 sizes, fp32 W/b per layer),
  fp32 opacity-sharpness scalar,
  u8 adam flag; if set, per parameter (enumeration order): u64 step count
    and fp32 first/second moment payloads.

Save -> load -> save round-trips byte-identically: training state is fp32
end to end and the JSON header is serialized canonically.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .models import ModelConfig, Tensor4DMono, build_model
from .planes import AXIS_INDEX

MAGIC = b"T4D1"
VERSION = 1
_AXES = "xyzt"


class CheckpointError(RuntimeError):
    pass


def _write_array_f32(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array_f32(fh, shape, dtype):
    n = int(np.prod(shape))
    buf = fh.read(4 * n)
    if len(buf) != 4 * n:
        raise CheckpointError("truncated checkpoint payload")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(dtype)


def _write_plane(fh, plane):
    fh.write(struct.pack("<BBIII", AXIS_INDEX[plane.axis_labels[0]],
                         AXIS_INDEX[plane.axis_labels[1]],
                         plane.resolution_u, plane.resolution_v,
                         plane.channels))
    _write_array_f32(fh, plane.data)


def _read_plane(fh, plane):
    a0, a1, ru, rv, ch = struct.unpack("<BBIII", fh.read(14))
    expect = (AXIS_INDEX[plane.axis_labels[0]], AXIS_INDEX[plane.axis_labels[1]],
              plane.resolution_u, plane.resolution_v, plane.channels)
    if (a0, a1, ru, rv, ch) != expect:
        raise CheckpointError(f"plane header {(a0, a1, ru, rv, ch)} != "
                              f"model expectation {expect}")
    plane.data[...] = _read_array_f32(fh, plane.data.shape, plane.data.dtype)


def _write_mlp(fh, mlp):
    fh.write(struct.pack("<I", len(mlp.layer_sizes)))
    fh.write(struct.pack(f"<{len(mlp.layer_sizes)}I", *mlp.layer_sizes))
    for w, b in zip(mlp.weights, mlp.biases):
        _write_array_f32(fh, w)
        _write_array_f32(fh, b)


def _read_mlp(fh, mlp):
    (n,) = struct.unpack("<I", fh.read(4))
    sizes = struct.unpack(f"<{n}I", fh.read(4 * n))
    if list(sizes) != mlp.layer_sizes:
        raise CheckpointError(f"mlp sizes {sizes} != model {mlp.layer_sizes}")
    for w, b in zip(mlp.weights, mlp.biases):
        w[...] = _read_array_f32(fh, w.shape, w.dtype)
        b[...] = _read_array_f32(fh, b.shape, b.dtype)


def _model_segments(model):
    """(planes, mlps) in the canonical serialization order."""
    if isinstance(model, Tensor4DMono):
        planes = (list(model.flow_planes.planes)
                  + list(model.canonical_lr.planes)
                  + list(model.canonical_hr.planes))
        mlps = [model.flow_mlp, model.geo_mlp, model.color_mlp]
    else:
        planes = list(model.field.lr.planes) + list(model.field.hr.planes)
        mlps = [model.geo_mlp, model.color_mlp]
    return planes, mlps


def save_checkpoint(path, model, iteration=0, rng=None, adam_states=None,
                    extra=None):
    """adam_states: dict name -> AdamState (see train module), optional."""
    header = {
        "config": model.cfg.to_dict(),
        "bbox": [list(model.bbox[0]), list(model.bbox[1])],
        "time_range": list(model.time_range),
        "iteration": int(iteration),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    planes, mlps = _model_segments(model)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for plane in planes:
            _write_plane(fh, plane)
        for mlp in mlps:
            _write_mlp(fh, mlp)
        _write_array_f32(fh, model.scale.theta)
        if adam_states is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            for p in model.parameters():
                st = adam_states[p.name]
                fh.write(struct.pack("<Q", st.step))
                _write_array_f32(fh, st.m)
                _write_array_f32(fh, st.v)


def load_checkpoint(path, dtype=np.float32):
    """Rebuild the model (and optional optimizer state) from a checkpoint.

    Returns (model, header, adam_states): adam_states is a dict of
    name -> AdamState or None when the file carries none.
    """
    from .train import AdamState

    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        bbox = (tuple(header["bbox"][0]), tuple(header["bbox"][1]))
        model = build_model(cfg, bbox, tuple(header["time_range"]),
                            rng=np.random.default_rng(0), dtype=dtype)
        planes, mlps = _model_segments(model)
        for plane in planes:
            _read_plane(fh, plane)
        for mlp in mlps:
            _read_mlp(fh, mlp)
        model.scale.theta[...] = _read_array_f32(fh, (), model.scale.theta.dtype)
        (has_adam,) = struct.unpack("<B", fh.read(1))
        adam_states = None
        if has_adam:
            adam_states = {}
            for p in model.parameters():
                (step,) = struct.unpack("<Q", fh.read(8))
                m = _read_array_f32(fh, p.data.shape, p.data.dtype)
                v = _read_array_f32(fh, p.data.shape, p.data.dtype)
                adam_states[p.name] = AdamState(m=m, v=v, step=step)
        tail = fh.read(1)
        if tail:
            raise CheckpointError("trailing bytes after checkpoint payload")
    return model, header, adam_states
