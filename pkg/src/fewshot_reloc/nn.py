"""Tiny convolutional network with hand-written backprop (numpy only).

Just enough machinery to train the patch descriptor: valid-padding strided
convolutions via im2col, ELU activations, dense layers, SGD with momentum.
Inputs are batches of (H, W, C) float64 images in [0, 1].
"""

from __future__ import annotations

import numpy as np

__all__ = ["Conv", "Dense", "Elu", "Flatten", "Network", "SgdMomentum", "glorot_uniform"]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    """k x k convolution, valid padding, configurable stride."""

    def __init__(self, kernel: int, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.kernel = kernel
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        fan_in = kernel * kernel * c_in
        self.w = glorot_uniform(rng, fan_in, c_out, (fan_in, c_out))
        self.b = np.zeros(c_out)
        self._index_cache: dict[tuple[int, int], tuple[np.ndarray, int, int]] = {}

    def _indices(self, h: int, w: int):
        key = (h, w)
        if key not in self._index_cache:
            h_out = (h - self.kernel) // self.stride + 1
            w_out = (w - self.kernel) // self.stride + 1
            oy = np.arange(h_out) * self.stride
            ox = np.arange(w_out) * self.stride
            ky = np.arange(self.kernel)
            kx = np.arange(self.kernel)
            rows = (oy[:, None, None, None] + ky[None, None, :, None])
            cols = (ox[None, :, None, None] + kx[None, None, None, :])
            flat = (rows * w + cols)[..., None] * self.c_in + np.arange(self.c_in)
            idx = flat.reshape(h_out * w_out, self.kernel * self.kernel * self.c_in)
            self._index_cache[key] = (idx, h_out, w_out)
        return self._index_cache[key]

    def forward(self, x: np.ndarray):
        b, h, w, _ = x.shape
        idx, h_out, w_out = self._indices(h, w)
        cols = x.reshape(b, h * w * self.c_in)[:, idx]
        out = cols @ self.w + self.b
        cache = (cols, (b, h, w), idx, (h_out, w_out))
        return out.reshape(b, h_out, w_out, self.c_out), cache

    def backward(self, cache, dout: np.ndarray):
        cols, (b, h, w), idx, (h_out, w_out) = cache
        dflat = dout.reshape(b, h_out * w_out, self.c_out)
        dw = np.einsum("bpk,bpo->ko", cols, dflat)
        db = dflat.sum(axis=(0, 1))
        dcols = dflat @ self.w.T
        dx = np.zeros((b, h * w * self.c_in))
        np.add.at(dx, (np.arange(b)[:, None, None], idx[None, :, :]), dcols)
        return dx.reshape(b, h, w, self.c_in), [dw, db]

    @property
    def params(self):
        return [self.w, self.b]

    def out_shape(self, h: int, w: int):
        return ((h - self.kernel) // self.stride + 1,
                (w - self.kernel) // self.stride + 1,
                self.c_out)


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.w = glorot_uniform(rng, n_in, n_out, (n_in, n_out))
        self.b = np.zeros(n_out)

    def forward(self, x: np.ndarray):
        return x @ self.w + self.b, x

    def backward(self, cache, dout: np.ndarray):
        x = cache
        return dout @ self.w.T, [x.T @ dout, dout.sum(axis=0)]

    @property
    def params(self):
        return [self.w, self.b]


class Elu:
    def forward(self, x: np.ndarray):
        out = np.where(x > 0, x, np.expm1(x))
        return out, out

    def backward(self, cache, dout: np.ndarray):
        out = cache
        return dout * np.where(out > 0, 1.0, out + 1.0), []

    params: list = []


class Flatten:
    def forward(self, x: np.ndarray):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dout: np.ndarray):
        return dout.reshape(cache), []

    params: list = []


class Network:
    """Sequential stack built from a layer-spec list.

    Spec entries: ``("conv", kernel, c_in, c_out, stride)``, ``("elu",)``,
    ``("flatten",)``, ``("dense", n_in, n_out)``.  Weight init is seeded
    Glorot-uniform in spec order, so identical (spec, seed) pairs produce
    identical networks.
    """

    def __init__(self, spec, seed: int):
        self.spec = [tuple(entry) for entry in spec]
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(seed))
        self.layers = []
        for entry in self.spec:
            kind = entry[0]
            if kind == "conv":
                self.layers.append(Conv(entry[1], entry[2], entry[3], entry[4], rng))
            elif kind == "dense":
                self.layers.append(Dense(entry[1], entry[2], rng))
            elif kind == "elu":
                self.layers.append(Elu())
            elif kind == "flatten":
                self.layers.append(Flatten())
            else:
                raise ValueError(f"unknown layer kind {kind!r}")

    def forward(self, x: np.ndarray, want_caches: bool = False):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return (x, caches) if want_caches else x

    def backward(self, caches, dout: np.ndarray):
        """Gradients for every parameter, aligned with :meth:`parameters`."""
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dout, layer_grads = self.layers[i].backward(caches[i], dout)
            grads[i] = layer_grads
        flat = []
        for layer_grads in grads:
            flat.extend(layer_grads)
        return flat

    def parameters(self):
        flat = []
        for layer in self.layers:
            flat.extend(layer.params)
        return flat

    def param_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_param_vector(self, vec: np.ndarray):
        pos = 0
        for p in self.parameters():
            n = p.size
            p[...] = vec[pos:pos + n].reshape(p.shape)
            pos += n
        if pos != vec.size:
            raise ValueError("parameter vector size mismatch")

    def copy(self) -> "Network":
        clone = Network(self.spec, self.seed)
        clone.set_param_vector(self.param_vector())
        return clone


class SgdMomentum:
    def __init__(self, params, learning_rate: float, momentum: float = 0.9):
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads):
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v -= self.learning_rate * g
            p += v
