"""Run configuration: a flat key-value text format with dotted sections.

Files hold one `key = value` pair per line (# starts a comment); every key
must be known, and command-line overrides use the same `key=value` syntax.
The resolved configuration is echoed into every output directory so any run
can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import os

from .models import ModelConfig
from .train import TrainSchedule


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_rgb(s):
    parts = [p for p in s.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ConfigError(f"expected three color components, got {s!r}")
    vals = tuple(float(p) for p in parts)
    return vals


_STR, _INT, _FLOAT, _BOOL, _RGB = str, int, float, _parse_bool, _parse_rgb

# key -> (parser, default)
KNOWN_KEYS = {
    "run.seed": (_INT, 0),
    "data.dir": (_STR, ""),
    "model.type": (_STR, "mv"),
    "model.n_lr": (_INT, 128),
    "model.n_hr": (_INT, 512),
    "model.channels": (_INT, 8),
    "model.geo_hidden": (_INT, 128),
    "model.geo_layers": (_INT, 3),
    "model.geo_feat": (_INT, 64),
    "model.color_hidden": (_INT, 64),
    "model.color_layers": (_INT, 2),
    "model.flow_hidden": (_INT, 64),
    "model.flow_layers": (_INT, 3),
    "model.enc_xyzt": (_INT, 6),
    "model.enc_dir": (_INT, 4),
    "model.activation": (_STR, "softplus"),
    "model.inv_s_init": (_FLOAT, 20.0),
    "model.sphere_prior": (_BOOL, True),
    "model.prior_radius": (_FLOAT, 0.5),
    "model.anchor_t0": (_BOOL, True),
    "model.color_loss": (_STR, "l1"),
    "loss.lambda_c": (_FLOAT, 1.0),
    "loss.lambda_r": (_FLOAT, 0.01),
    "loss.lambda_e": (_FLOAT, 0.1),
    "render.n_samples": (_INT, 96),
    "render.background": (_RGB, (0.0, 0.0, 0.0)),
    "train.iters": (_INT, 20000),
    "train.coarse_frac": (_FLOAT, 0.2),
    "train.ray_batch": (_INT, 1024),
    "train.eikonal_batch": (_INT, 1024),
    "train.lr_planes": (_FLOAT, 5e-4),
    "train.lr_mlp": (_FLOAT, 1e-4),
    "train.lr_scale": (_FLOAT, 1e-3),
    "train.lr_decay": (_FLOAT, 1.0),
    "train.beta1": (_FLOAT, 0.9),
    "train.beta2": (_FLOAT, 0.99),
    "train.eps": (_FLOAT, 1e-15),
    "train.log_every": (_INT, 1),
    "train.eval_every": (_INT, 1000),
    "train.checkpoint_every": (_INT, 5000),
}


class RunConfig:
    """Resolved configuration: file values overlaid with flag overrides."""

    def __init__(self, values=None):
        self.values = {k: d for k, (_, d) in KNOWN_KEYS.items()}
        for k, v in (values or {}).items():
            self._set_parsed(k, v)

    def _set_parsed(self, key, value):
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def set(self, key, raw):
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = KNOWN_KEYS[key][0]
        try:
            self.values[key] = parser(raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e

    def __getitem__(self, key):
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    @classmethod
    def from_file(cls, path, overrides=()):
        cfg = cls()
        if path is not None:
            if not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            with open(path) as fh:
                for ln, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{ln}: expected key = value")
                    key, raw = (s.strip() for s in line.split("=", 1))
                    cfg.set(key, raw)
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"override must be key=value, got {ov!r}")
            key, raw = (s.strip() for s in ov.split("=", 1))
            cfg.set(key, raw)
        return cfg

    def echo(self, path):
        with open(path, "w") as fh:
            fh.write("# resolved run configuration\n")
            for k in sorted(self.values):
                v = self.values[k]
                if isinstance(v, tuple):
                    v = ",".join(repr(float(c)) for c in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, float):
                    v = repr(v)
                fh.write(f"{k} = {v}\n")

    def model_config(self):
        g = self.values
        return ModelConfig(
            model_type=g["model.type"], n_lr=g["model.n_lr"],
            n_hr=g["model.n_hr"], channels=g["model.channels"],
            geo_hidden=g["model.geo_hidden"], geo_layers=g["model.geo_layers"],
            geo_feat=g["model.geo_feat"],
            color_hidden=g["model.color_hidden"],
            color_layers=g["model.color_layers"],
            flow_hidden=g["model.flow_hidden"],
            flow_layers=g["model.flow_layers"],
            enc_levels_xyzt=g["model.enc_xyzt"],
            enc_levels_dir=g["model.enc_dir"],
            activation=g["model.activation"],
            inv_s_init=g["model.inv_s_init"],
            sphere_prior=g["model.sphere_prior"],
            prior_radius=g["model.prior_radius"],
            anchor_t0=g["model.anchor_t0"],
            color_loss=g["model.color_loss"],
            lambda_c=g["loss.lambda_c"], lambda_r=g["loss.lambda_r"],
            lambda_e=g["loss.lambda_e"],
            n_samples=g["render.n_samples"],
            background=g["render.background"],
        ).validate()

    def schedule(self):
        g = self.values
        return TrainSchedule(
            total_iters=g["train.iters"], coarse_frac=g["train.coarse_frac"],
            ray_batch=g["train.ray_batch"],
            eikonal_batch=g["train.eikonal_batch"],
            lr_planes=g["train.lr_planes"], lr_mlp=g["train.lr_mlp"],
            lr_scale=g["train.lr_scale"], lr_decay=g["train.lr_decay"],
            beta1=g["train.beta1"], beta2=g["train.beta2"],
            eps=g["train.eps"], seed=g["run.seed"],
            log_every=g["train.log_every"], eval_every=g["train.eval_every"],
            checkpoint_every=g["train.checkpoint_every"],
        ).validate()


def echo_args(out_dir, mapping, name="run_config.txt"):
    """Echo a plain flag mapping (gen/render/eval commands) into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write("# resolved command arguments\n")
        for k in sorted(mapping):
            fh.write(f"{k} = {mapping[k]}\n")
