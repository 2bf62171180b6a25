"""Shared test helpers: finite-difference oracles and micro model builders."""

import numpy as np
import pytest

from dynaplane.models import ModelConfig, build_model


def numeric_grad(f, x, eps=1e-5):
    """fp64 central finite differences of scalar f() wrt array x, mutating
    x in place entry by entry (f must read the live array)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


def micro_config(model_type="mv", **overrides):
    """Desk-micro hyperparameters: tiny planes and heads, fp64-friendly."""
    kw = dict(model_type=model_type, n_lr=4, n_hr=6, channels=2,
              geo_hidden=8, geo_layers=2, geo_feat=4,
              color_hidden=8, color_layers=1, flow_hidden=8, flow_layers=2,
              enc_levels_xyzt=2, enc_levels_dir=1, n_samples=4,
              inv_s_init=8.0)
    kw.update(overrides)
    return ModelConfig(**kw)


def micro_model(model_type="mv", seed=0, dtype=np.float64, generic=True,
                **overrides):
    """Tiny model with generic parameter values: planes carry signal and the
    zero-initialized output layers (flow, color) are randomized so every
    gradient path is live."""
    rng = np.random.default_rng(seed)
    model = build_model(micro_config(model_type, **overrides), rng=rng,
                        dtype=dtype)
    if generic:
        for p in model.parameters():
            if p.kind.startswith("plane"):
                p.data[...] = rng.uniform(-0.3, 0.3, p.data.shape)
        for name in ("flow_mlp", "color_mlp"):
            net = getattr(model, name, None)
            if net is not None:
                net.weights[-1][...] = rng.uniform(-0.2, 0.2,
                                                   net.weights[-1].shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
