"""Minimal layer library: plain numpy forward passes with exact adjoints.

Parameters are stored as float32 masters; every pass computes in the dtype
of its input, so the same network can run at 64-bit precision for gradient
verification. Backward passes return the input gradient and (in training
mode) accumulate parameter gradients. All operations are deterministic:
identical inputs produce bit-identical outputs.
"""

from __future__ import annotations

import numpy as np


class Layer:
    """Base: subclasses define forward(x, train) and backward(dy, need_param_grads)."""

    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy, need_param_grads=True):
        raise NotImplementedError

    def named_params(self, prefix=""):
        for key, value in self.params.items():
            yield f"{prefix}{key}", value


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Layer):
    """3x3-style convolution via im2col; no bias (batch norm follows)."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, pad=1, rng=None):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.pad = kernel, pad
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        self.params["weight"] = _uniform_init(
            rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)

    def _cols(self, xp, out_h, out_w):
        b = xp.shape[0]
        k = self.kernel
        sh, sw = self.stride
        cols = np.empty((b, self.in_ch, k * k, out_h, out_w), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i * k + j] = xp[:, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw]
        return cols.transpose(0, 3, 4, 1, 2).reshape(b * out_h * out_w, -1)

    def forward(self, x, train=False):
        k, p = self.kernel, self.pad
        sh, sw = self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        out_h = (xp.shape[2] - k) // sh + 1
        out_w = (xp.shape[3] - k) // sw + 1
        cols = self._cols(xp, out_h, out_w)
        w = self.params["weight"].astype(x.dtype, copy=False)
        y = cols @ w.reshape(self.out_ch, -1).T
        # keep cols only when a parameter-gradient pass will follow
        self._cache = (xp.shape, x.shape, out_h, out_w, cols if train else None)
        return y.reshape(x.shape[0], out_h, out_w, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dy, need_param_grads=True):
        xp_shape, x_shape, out_h, out_w, cols = self._cache
        k, p = self.kernel, self.pad
        sh, sw = self.stride
        b = x_shape[0]
        w = self.params["weight"].astype(dy.dtype, copy=False)
        dy_rows = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        if need_param_grads:
            if cols is None:
                raise RuntimeError("parameter gradients need a train-mode forward")
            self.grads["weight"] = (dy_rows.T @ cols).reshape(w.shape)
        dcols = (dy_rows @ w.reshape(self.out_ch, -1)).reshape(
            b, out_h, out_w, self.in_ch, k * k).transpose(0, 3, 4, 1, 2)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw] += dcols[:, :, i * k + j]
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class Conv1d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride=1, pad=0, rng=None):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.params["weight"] = _uniform_init(
            rng, (out_ch, in_ch, kernel), in_ch * kernel)

    def _cols(self, xp, out_l):
        b = xp.shape[0]
        k, s = self.kernel, self.stride
        cols = np.empty((b, self.in_ch, k, out_l), dtype=xp.dtype)
        for i in range(k):
            cols[:, :, i] = xp[:, :, i:i + s * out_l:s]
        return cols.transpose(0, 3, 1, 2).reshape(b * out_l, -1)

    def forward(self, x, train=False):
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
        out_l = (xp.shape[2] - k) // s + 1
        cols = self._cols(xp, out_l)
        w = self.params["weight"].astype(x.dtype, copy=False)
        y = cols @ w.reshape(self.out_ch, -1).T
        self._cache = (xp.shape, x.shape, out_l, cols if train else None)
        return y.reshape(x.shape[0], out_l, self.out_ch).transpose(0, 2, 1)

    def backward(self, dy, need_param_grads=True):
        xp_shape, x_shape, out_l, cols = self._cache
        k, s, p = self.kernel, self.stride, self.pad
        w = self.params["weight"].astype(dy.dtype, copy=False)
        dy_rows = dy.transpose(0, 2, 1).reshape(-1, self.out_ch)
        if need_param_grads:
            if cols is None:
                raise RuntimeError("parameter gradients need a train-mode forward")
            self.grads["weight"] = (dy_rows.T @ cols).reshape(w.shape)
        dcols = (dy_rows @ w.reshape(self.out_ch, -1)).reshape(
            x_shape[0], out_l, self.in_ch, k).transpose(0, 2, 3, 1)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            dxp[:, :, i:i + s * out_l:s] += dcols[:, :, i]
        if p:
            return dxp[:, :, p:-p]
        return dxp


class BatchNorm(Layer):
    """Per-channel normalization (channel axis 1) for 3- or 4-axis inputs.

    Training mode normalizes with batch statistics and updates running
    estimates; eval mode uses the frozen running estimates, which is what
    the attacks differentiate through.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)
        self.params["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.params["running_var"] = np.ones(channels, dtype=np.float32)

    @staticmethod
    def _shape(x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, train=False):
        shape = self._shape(x)
        axes = tuple(i for i in range(x.ndim) if i != 1)
        gamma = self.params["gamma"].astype(x.dtype, copy=False)
        beta = self.params["beta"].astype(x.dtype, copy=False)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
            xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
            m = self.momentum
            self.params["running_mean"] = (
                (1 - m) * self.params["running_mean"] + m * mean.astype(np.float32))
            self.params["running_var"] = (
                (1 - m) * self.params["running_var"] + m * var.astype(np.float32))
            self._cache = ("train", xhat, inv_std, axes, shape)
            return gamma.reshape(shape) * xhat + beta.reshape(shape)
        inv_std = 1.0 / np.sqrt(
            self.params["running_var"].astype(x.dtype) + x.dtype.type(self.eps))
        scale = gamma * inv_std
        self._cache = ("eval", scale, shape)
        return (x - self.params["running_mean"].astype(x.dtype).reshape(shape)) \
            * scale.reshape(shape) + beta.reshape(shape)

    def backward(self, dy, need_param_grads=True):
        if self._cache[0] == "eval":
            _, scale, shape = self._cache
            return dy * scale.reshape(shape)
        _, xhat, inv_std, axes, shape = self._cache
        gamma = self.params["gamma"].astype(dy.dtype, copy=False)
        if need_param_grads:
            self.grads["beta"] = dy.sum(axis=axes)
            self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        n = dy.size // dy.shape[1]
        dxhat = dy * gamma.reshape(shape)
        term = (dxhat.sum(axis=axes).reshape(shape)
                + xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
        return (inv_std.reshape(shape) / n) * (n * dxhat - term)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dy, need_param_grads=True):
        return np.where(self._mask, dy, dy.dtype.type(0))


class MaxPool2d(Layer):
    def __init__(self, size=2):
        super().__init__()
        self.size = (size, size) if isinstance(size, int) else tuple(size)

    def forward(self, x, train=False):
        kh, kw = self.size
        b, c, h, w = x.shape
        h2, w2 = h // kh, w // kw
        tiles = x[:, :, :h2 * kh, :w2 * kw].reshape(b, c, h2, kh, w2, kw)
        tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, kh * kw)
        self._arg = tiles.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(tiles, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dy, need_param_grads=True):
        kh, kw = self.size
        b, c, h, w = self._shape
        h2, w2 = h // kh, w // kw
        dtiles = np.zeros((b, c, h2, w2, kh * kw), dtype=dy.dtype)
        np.put_along_axis(dtiles, self._arg[..., None], dy[..., None], axis=-1)
        dtiles = dtiles.reshape(b, c, h2, w2, kh, kw).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((b, c, h, w), dtype=dy.dtype)
        dx[:, :, :h2 * kh, :w2 * kw] = dtiles.reshape(b, c, h2 * kh, w2 * kw)
        return dx


class MaxPool1d(Layer):
    def __init__(self, size):
        super().__init__()
        self.size = size

    def forward(self, x, train=False):
        k = self.size
        b, c, l = x.shape
        l2 = l // k
        tiles = x[:, :, :l2 * k].reshape(b, c, l2, k)
        self._arg = tiles.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(tiles, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dy, need_param_grads=True):
        k = self.size
        b, c, l = self._shape
        l2 = l // k
        dtiles = np.zeros((b, c, l2, k), dtype=dy.dtype)
        np.put_along_axis(dtiles, self._arg[..., None], dy[..., None], axis=-1)
        dx = np.zeros((b, c, l), dtype=dy.dtype)
        dx[:, :, :l2 * k] = dtiles.reshape(b, c, l2 * k)
        return dx


class AvgPool2d(Layer):
    """Mean pooling: denser gradients than max pooling, which matters for
    sign-step attacks that must steer energy out of narrow bands."""

    def __init__(self, size=2):
        super().__init__()
        self.size = (size, size) if isinstance(size, int) else tuple(size)

    def forward(self, x, train=False):
        kh, kw = self.size
        b, c, h, w = x.shape
        h2, w2 = h // kh, w // kw
        self._shape = x.shape
        tiles = x[:, :, :h2 * kh, :w2 * kw].reshape(b, c, h2, kh, w2, kw)
        return tiles.mean(axis=(3, 5))

    def backward(self, dy, need_param_grads=True):
        kh, kw = self.size
        b, c, h, w = self._shape
        h2, w2 = h // kh, w // kw
        dx = np.zeros((b, c, h, w), dtype=dy.dtype)
        spread = np.broadcast_to(
            (dy / dy.dtype.type(kh * kw))[:, :, :, None, :, None],
            (b, c, h2, kh, w2, kw))
        dx[:, :, :h2 * kh, :w2 * kw] = spread.reshape(b, c, h2 * kh, w2 * kw)
        return dx


class AvgPool1d(Layer):
    def __init__(self, size):
        super().__init__()
        self.size = size

    def forward(self, x, train=False):
        k = self.size
        b, c, l = x.shape
        l2 = l // k
        self._shape = x.shape
        return x[:, :, :l2 * k].reshape(b, c, l2, k).mean(axis=3)

    def backward(self, dy, need_param_grads=True):
        k = self.size
        b, c, l = self._shape
        l2 = l // k
        dx = np.zeros((b, c, l), dtype=dy.dtype)
        spread = np.broadcast_to(
            (dy / dy.dtype.type(k))[:, :, :, None], (b, c, l2, k))
        dx[:, :, :l2 * k] = spread.reshape(b, c, l2 * k)
        return dx


class GlobalAvgPool2d(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy, need_param_grads=True):
        b, c, h, w = self._shape
        return np.broadcast_to(
            (dy / dy.dtype.type(h * w))[:, :, None, None], self._shape).copy()


class GlobalMaxAvgPool1d(Layer):
    """Concatenate per-channel global max and global mean: (B, C, L) -> (B, 2C)."""

    def forward(self, x, train=False):
        self._shape = x.shape
        self._arg = x.argmax(axis=2)
        mx = np.take_along_axis(x, self._arg[:, :, None], axis=2)[:, :, 0]
        return np.concatenate([mx, x.mean(axis=2)], axis=1)

    def backward(self, dy, need_param_grads=True):
        b, c, l = self._shape
        dmax, davg = dy[:, :c], dy[:, c:]
        dx = np.broadcast_to((davg / dy.dtype.type(l))[:, :, None], self._shape).copy()
        np.put_along_axis(
            dx, self._arg[:, :, None],
            np.take_along_axis(dx, self._arg[:, :, None], axis=2) + dmax[:, :, None],
            axis=2)
        return dx


class SpectralSplit(Layer):
    """(B, 1, L) -> (B, 2, L): the raw signal plus a fixed high-band view.

    A structured front end for raw-waveform models: relevant micro-structure
    can sit 40-50 dB below the carrier, far beyond the stopband a short
    learned FIR reaches from random init. The split is a fixed linear map
    (DFT mask with a raised-cosine edge), so its adjoint is itself.
    """

    def __init__(self, edge_lo_hz, edge_hi_hz, sample_rate, high_gain=256.0):
        super().__init__()
        self.edge = (float(edge_lo_hz), float(edge_hi_hz))
        self.sample_rate = sample_rate
        self.high_gain = high_gain
        self._masks = {}

    def _mask(self, n, dtype):
        key = (n, np.dtype(dtype).name)
        mask = self._masks.get(key)
        if mask is None:
            freqs = np.fft.rfftfreq(n, d=1.0 / self.sample_rate)
            lo, hi = self.edge
            ramp = np.clip((freqs - lo) / (hi - lo), 0.0, 1.0)
            mask = (0.5 - 0.5 * np.cos(np.pi * ramp)).astype(dtype)
            self._masks[key] = mask
        return mask

    def _apply(self, x):
        n = x.shape[-1]
        spec = np.fft.rfft(x, axis=-1)
        out = np.fft.irfft(spec * self._mask(n, x.real.dtype), n=n, axis=-1)
        return out * x.dtype.type(self.high_gain)

    def forward(self, x, train=False):
        return np.concatenate([x, self._apply(x).astype(x.dtype)], axis=1)

    def backward(self, dy, need_param_grads=True):
        return dy[:, :1] + self._apply(dy[:, 1:2]).astype(dy.dtype)


class Square(Layer):
    """Elementwise x^2: a smooth rectifier for energy-style front ends."""

    def forward(self, x, train=False):
        self._x = x
        return x * x

    def backward(self, dy, need_param_grads=True):
        return 2.0 * self._x * dy


class LogEps(Layer):
    """log(x + eps) for non-negative activations (compresses energy scales)."""

    def __init__(self, eps=1e-6):
        super().__init__()
        self.eps = eps

    def forward(self, x, train=False):
        self._denom = x + x.dtype.type(self.eps)
        return np.log(self._denom)

    def backward(self, dy, need_param_grads=True):
        return dy / self._denom


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.params["weight"] = _uniform_init(
            rng, (out_features, in_features), in_features)
        self.params["bias"] = np.zeros(out_features, dtype=np.float32)

    def forward(self, x, train=False):
        self._x = x
        w = self.params["weight"].astype(x.dtype, copy=False)
        return x @ w.T + self.params["bias"].astype(x.dtype, copy=False)

    def backward(self, dy, need_param_grads=True):
        if need_param_grads:
            self.grads["weight"] = dy.T @ self._x
            self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"].astype(dy.dtype, copy=False)


class Scale(Layer):
    """Fixed inference-time multiplier on the logits.

    Argmax-invariant, so accuracies are unchanged; it sharpens deployed
    confidences without distorting the training loss. Training-mode passes
    are identity (like dropout, the layer is train/eval asymmetric).
    """

    def __init__(self, factor):
        super().__init__()
        self.factor = factor

    def forward(self, x, train=False):
        self._train = train
        if train:
            return x
        return x * x.dtype.type(self.factor)

    def backward(self, dy, need_param_grads=True):
        if self._train:
            return dy
        return dy * dy.dtype.type(self.factor)


class FeatureNorm(Layer):
    """Batch normalization of each (channel, coefficient) row of a feature map.

    Log-power features span tens of nats between quiet and loud cells;
    normalizing per row keeps the conv stack's input well-scaled.
    """

    def __init__(self, channels, coeffs):
        super().__init__()
        self.inner = BatchNorm(channels * coeffs)
        self.params = self.inner.params
        self.grads = self.inner.grads

    def forward(self, x, train=False):
        b, c, f, t = x.shape
        self._shape = x.shape
        out = self.inner.forward(x.reshape(b, c * f, t), train=train)
        return out.reshape(self._shape)

    def backward(self, dy, need_param_grads=True):
        b, c, f, t = self._shape
        dx = self.inner.backward(dy.reshape(b, c * f, t), need_param_grads)
        return dx.reshape(self._shape)


class Sequential(Layer):
    def __init__(self, named_layers):
        super().__init__()
        self.layers = list(named_layers)

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dy, need_param_grads=True):
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy, need_param_grads=need_param_grads)
        return dy

    def named_params(self, prefix=""):
        for name, layer in self.layers:
            yield from layer.named_params(f"{prefix}{name}.")

    def walk(self, prefix=""):
        for name, layer in self.layers:
            if isinstance(layer, (Sequential, Residual)):
                yield from layer.walk(f"{prefix}{name}.")
            else:
                yield f"{prefix}{name}", layer


class Residual(Layer):
    """y = x + body(x); channel counts are preserved so the skip is identity."""

    def __init__(self, body: Sequential):
        super().__init__()
        self.body = body

    def forward(self, x, train=False):
        return x + self.body.forward(x, train=train)

    def backward(self, dy, need_param_grads=True):
        return dy + self.body.backward(dy, need_param_grads=need_param_grads)

    def named_params(self, prefix=""):
        yield from self.body.named_params(prefix)

    def walk(self, prefix=""):
        yield from self.body.walk(prefix)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Per-sample loss and logit gradients for integer class targets.

    Returns (loss_vec, dlogits) where dlogits are the gradients of each
    sample's own loss (no batch averaging; callers scale as needed).
    """
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(logits.shape[0])
    loss_vec = -logp[rows, targets]
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    return loss_vec, dlogits


_NON_TRAINABLE = ("running_mean", "running_var")


def _trainable_items(net):
    for path, layer in net.walk():
        for key in layer.params:
            if key not in _NON_TRAINABLE:
                yield f"{path}.{key}", layer, key


class MomentumSGD:
    """Plain momentum descent over a network's named parameters."""

    def __init__(self, net, learning_rate, momentum=0.9):
        self.net = net
        self.lr = learning_rate
        self.momentum = momentum
        self._velocity = {}

    def step(self):
        for name, layer, key in _trainable_items(self.net):
            grad = layer.grads.get(key)
            if grad is None:
                continue
            vel = self._velocity.get(name)
            if vel is None:
                vel = np.zeros_like(layer.params[key])
            vel = self.momentum * vel - self.lr * grad.astype(np.float32)
            self._velocity[name] = vel
            layer.params[key] = layer.params[key] + vel


class Adam:
    """Adam with bias correction; all state in float32 for determinism."""

    def __init__(self, net, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self._t
        bias2 = 1.0 - b2 ** self._t
        for name, layer, key in _trainable_items(self.net):
            grad = layer.grads.get(key)
            if grad is None:
                continue
            grad = grad.astype(np.float32)
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(layer.params[key])
                self._v[name] = np.zeros_like(layer.params[key])
            m = b1 * m + (1 - b1) * grad
            v = b2 * self._v[name] + (1 - b2) * grad * grad
            self._m[name], self._v[name] = m, v
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            layer.params[key] = layer.params[key] - self.lr * update
