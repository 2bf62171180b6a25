"""Sinusoidal positional encoding and small dense heads with explicit
reverse-mode gradients.

There is no general autodiff graph here: forward passes record a GradTape
(per-layer inputs and pre-activations) and backward replays the fixed
affine/activation chain, accumulating parameter gradients into .grad
buffers and returning the input gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PosEncoding:
    """Interleaved sin/cos features: per input component x the block
    [x (if include_input), sin(2^0 pi x), cos(2^0 pi x), ...,
    sin(2^(L-1) pi x), cos(2^(L-1) pi x)]."""

    num_frequencies: int
    include_input: bool = True

    def out_dim(self, in_dim):
        return in_dim * (2 * self.num_frequencies + (1 if self.include_input else 0))

    def encode(self, v):
        """v: (N, d) -> (N, d * (2L + include)). Also usable with (d,)."""
        v = np.asarray(v)
        scalar = v.ndim == 1
        v = np.atleast_2d(v)
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite encoding input")
        n, d = v.shape
        L = self.num_frequencies
        block = 2 * L + (1 if self.include_input else 0)
        out = np.empty((n, d, block), dtype=v.dtype)
        if self.include_input:
            out[:, :, 0] = v
        if L > 0:
            freqs = (2.0 ** np.arange(L)) * np.pi
            ang = v[:, :, None] * freqs.astype(v.dtype)  # (N, d, L)
            base = 1 if self.include_input else 0
            out[:, :, base::2] = np.sin(ang)
            out[:, :, base + 1::2] = np.cos(ang)
        out = out.reshape(n, d * block)
        return out[0] if scalar else out

    def backward(self, v, upstream):
        """d(encode)/dv chain: v (N, d), upstream (N, out_dim) -> (N, d)."""
        v = np.atleast_2d(np.asarray(v))
        n, d = v.shape
        L = self.num_frequencies
        block = 2 * L + (1 if self.include_input else 0)
        up = upstream.reshape(n, d, block)
        dv = np.zeros_like(v)
        if self.include_input:
            dv += up[:, :, 0]
        if L > 0:
            freqs = ((2.0 ** np.arange(L)) * np.pi).astype(v.dtype)
            ang = v[:, :, None] * freqs
            base = 1 if self.include_input else 0
            dv += np.sum(freqs * (np.cos(ang) * up[:, :, base::2]
                                  - np.sin(ang) * up[:, :, base + 1::2]), axis=2)
        return dv


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    """Numerically stable logistic, branch-free: shares exp(-|x|)."""
    t = np.exp(-np.abs(x))
    lo = t / (1.0 + t)
    return np.where(x >= 0, 1.0 - lo, lo)


def _softplus_and_deriv(z):
    """softplus(z) and its derivative sigmoid(z) from one exp evaluation."""
    t = np.exp(-np.abs(z))
    h = np.maximum(z, 0.0) + np.log1p(t)
    lo = t / (1.0 + t)
    return h, np.where(z >= 0, 1.0 - lo, lo)


@dataclass
class GradTape:
    """Activations recorded by one forward call, consumed by backward."""

    inputs: list      # input of each layer, [x, h1, ..., h_{L-1}]
    act_derivs: list  # activation derivative at each hidden pre-activation


class Mlp:
    """Dense chain with softplus/relu hidden activations and a linear output.

    weights[l] has shape (in_l, out_l); forward is x @ W + b per layer.
    """

    def __init__(self, layer_sizes, activation="softplus", rng=None,
                 dtype=np.float32, out_scale=1.0, zero_out_layer=False):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in ("softplus", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = list(layer_sizes)
        self.activation = activation
        if rng is None:
            rng = np.random.default_rng(0)
        self.weights, self.biases = [], []
        self.w_grads, self.b_grads = [], []
        last = len(layer_sizes) - 2
        for li, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            bound = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
            if li == last:
                w *= 0.0 if zero_out_layer else out_scale
            self.weights.append(w)
            self.biases.append(np.zeros(n_out, dtype=dtype))
            self.w_grads.append(np.zeros_like(w))
            self.b_grads.append(np.zeros_like(self.biases[-1]))

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def zero_grad(self):
        for g in self.w_grads:
            g[...] = 0.0
        for g in self.b_grads:
            g[...] = 0.0

    def _act_pair(self, z):
        """(activation(z), activation'(z)) in one pass."""
        if self.activation == "softplus":
            return _softplus_and_deriv(z)
        mask = (z > 0.0).astype(z.dtype)
        return z * mask, mask

    def forward(self, x, want_tape=False):
        """x: (N, in_dim) -> (N, out_dim); with want_tape also returns the
        GradTape required by backward."""
        x = np.atleast_2d(np.asarray(x))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.in_dim}")
        inputs, derivs = [], []
        h = x
        n_layers = len(self.weights)
        for li in range(n_layers):
            if want_tape:
                inputs.append(h)
            z = h @ self.weights[li] + self.biases[li]
            if li < n_layers - 1:
                h, d = self._act_pair(z)
                if want_tape:
                    derivs.append(d)
            else:
                h = z
        if want_tape:
            return h, GradTape(inputs, derivs)
        return h

    def backward(self, tape, upstream):
        """Accumulate parameter gradients for the forward pass recorded in
        tape; returns d(loss)/d(input), shape (N, in_dim)."""
        if tape is None:
            raise ValueError("backward requires the tape of a prior forward")
        upstream = np.atleast_2d(np.asarray(upstream))
        if upstream.shape[1] != self.out_dim:
            raise ValueError(f"upstream dim {upstream.shape[1]} != {self.out_dim}")
        g = upstream
        for li in range(len(self.weights) - 1, -1, -1):
            self.w_grads[li] += tape.inputs[li].T @ g
            self.b_grads[li] += g.sum(axis=0)
            g = g @ self.weights[li].T
            if li > 0:
                g = g * tape.act_derivs[li - 1]
        return g

    def astype(self, dtype):
        """Cast parameters (and fresh grads) to dtype, in place."""
        self.weights = [w.astype(dtype) for w in self.weights]
        self.biases = [b.astype(dtype) for b in self.biases]
        self.w_grads = [np.zeros_like(w) for w in self.weights]
        self.b_grads = [np.zeros_like(b) for b in self.biases]
        return self
