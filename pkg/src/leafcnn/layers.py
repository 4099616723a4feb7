"""Network layers: forward and backward passes.

Every layer stores its forward cache on the instance, so a layer object
serves a single training stream at a time. Parameters and their gradients
live in the ``params`` / ``grads`` dicts keyed by slot name; parameter
updates happen in place so references held by the optimizer stay valid.
"""

import numpy as np

from .tensor import (
    ShapeMismatchError,
    col2im_nchw,
    conv_out_extent,
    im2col_nchw,
    matmul,
)


class Layer:
    """Base class; subclasses implement forward/backward."""

    kind = "base"

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grads(self):
        for slot, p in self.params.items():
            g = self.grads.get(slot)
            if g is None or g.shape != p.shape:
                self.grads[slot] = np.zeros_like(p)
            else:
                g.fill(0.0)

    def out_channels(self, in_channels):
        return in_channels


class Conv2D(Layer):
    """2-D cross-correlation with per-output-channel bias (no kernel flip)."""

    kind = "Conv"

    def __init__(self, name, in_channels, out_channels, kernel, stride=1, pad=0,
                 dtype=np.float32):
        super().__init__(name)
        self.cin = in_channels
        self.cout = out_channels
        self.kernel = kernel if isinstance(kernel, tuple) else (kernel, kernel)
        self.stride = stride if isinstance(stride, tuple) else (stride, stride)
        self.pad = pad if isinstance(pad, tuple) else (pad, pad)
        kh, kw = self.kernel
        self.params["weight"] = np.zeros((out_channels, in_channels, kh, kw), dtype)
        self.params["bias"] = np.zeros((out_channels,), dtype)

    def out_channels(self, in_channels):
        return self.cout

    def forward(self, x, train=False, rng=None):
        n, c, h, w = x.shape
        if c != self.cin:
            raise ShapeMismatchError(
                f"{self.name}: expected {self.cin} input channels, got {c}"
            )
        w_ = self.params["weight"]
        k = w_.reshape(self.cout, -1)
        cols = im2col_nchw(x, self.kernel, self.stride, self.pad, floor_mode=True)
        ho = conv_out_extent(h, self.kernel[0], self.stride[0], self.pad[0], True)
        wo = conv_out_extent(w, self.kernel[1], self.stride[1], self.pad[1], True)
        out = np.matmul(
            k.astype(np.float64, copy=False), cols.astype(np.float64, copy=False)
        )
        out += self.params["bias"].astype(np.float64)[None, :, None]
        self._cache = (x.shape, cols)
        return out.astype(x.dtype, copy=False).reshape(n, self.cout, ho, wo)

    def backward(self, dy):
        in_shape, cols = self._cache
        n = dy.shape[0]
        dy2 = dy.reshape(n, self.cout, -1)
        dy64 = dy2.astype(np.float64, copy=False)
        cols64 = cols.astype(np.float64, copy=False)
        dk = np.einsum("nol,nkl->ok", dy64, cols64)
        self.grads["weight"] += dk.reshape(self.params["weight"].shape).astype(
            self.params["weight"].dtype
        )
        self.grads["bias"] += dy64.sum(axis=(0, 2)).astype(self.params["bias"].dtype)
        k = self.params["weight"].reshape(self.cout, -1)
        dcols = np.matmul(k.T.astype(np.float64, copy=False), dy64)
        dcols = dcols.astype(dy.dtype, copy=False)
        return col2im_nchw(dcols, in_shape, self.kernel, self.stride, self.pad,
                           floor_mode=True)


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dy):
        return np.where(self._mask, dy, dy.dtype.type(0))


class LRN(Layer):
    """Across-channel local response normalization.

    b_c = a_c / (k + (alpha/n) * sum_{c' in window(c)} a_{c'}^2)^beta with a
    window of n channels centered at c, truncated at the channel edges.
    """

    kind = "LRN"

    def __init__(self, name, n=5, k=2.0, alpha=1e-4, beta=0.75):
        super().__init__(name)
        if n % 2 == 0:
            raise ValueError(f"{name}: LRN window size must be odd, got {n}")
        self.n = n
        self.k = k
        self.alpha = alpha
        self.beta = beta

    def _window_sum(self, x):
        c = x.shape[1]
        half = self.n // 2
        out = np.zeros_like(x)
        for off in range(-half, half + 1):
            lo = max(0, -off)
            hi = min(c, c - off)
            out[:, lo:hi] += x[:, lo + off:hi + off]
        return out

    def forward(self, x, train=False, rng=None):
        s = self._window_sum(x * x)
        denom = self.k + (self.alpha / self.n) * s
        scale = denom ** (-self.beta)
        self._cache = (x, denom, scale)
        return (x * scale).astype(x.dtype, copy=False)

    def backward(self, dy):
        x, denom, scale = self._cache
        inner = dy * x * denom ** (-self.beta - 1.0)
        dx = dy * scale - (2.0 * self.alpha * self.beta / self.n) * x * self._window_sum(inner)
        return dx.astype(dy.dtype, copy=False)


class MaxPool(Layer):
    """Max pooling; gradient routes to the first-occurrence argmax per window."""

    kind = "MaxPool"

    def __init__(self, name, kernel, stride=None, pad=0):
        super().__init__(name)
        self.kernel = kernel if isinstance(kernel, tuple) else (kernel, kernel)
        self.stride = self.kernel if stride is None else (
            stride if isinstance(stride, tuple) else (stride, stride)
        )
        self.pad = pad if isinstance(pad, tuple) else (pad, pad)

    def forward(self, x, train=False, rng=None):
        n, c, h, w = x.shape
        ho = conv_out_extent(h, self.kernel[0], self.stride[0], self.pad[0], True)
        wo = conv_out_extent(w, self.kernel[1], self.stride[1], self.pad[1], True)
        flat = x.reshape(n * c, 1, h, w)
        cols = im2col_nchw(flat, self.kernel, self.stride, self.pad,
                           pad_value=-np.inf, floor_mode=True)
        idx = np.argmax(cols, axis=1)
        out = np.take_along_axis(cols, idx[:, None, :], axis=1)[:, 0, :]
        self._cache = (x.shape, idx, cols.shape)
        return out.reshape(n, c, ho, wo)

    def backward(self, dy):
        in_shape, idx, cols_shape = self._cache
        n, c, h, w = in_shape
        dcols = np.zeros(cols_shape, dtype=dy.dtype)
        np.put_along_axis(dcols, idx[:, None, :], dy.reshape(n * c, 1, -1), axis=1)
        dx = col2im_nchw(dcols, (n * c, 1, h, w), self.kernel, self.stride,
                         self.pad, floor_mode=True)
        return dx.reshape(in_shape)


class AvgPool(Layer):
    kind = "AvgPool"

    def __init__(self, name, kernel, stride=None, pad=0):
        super().__init__(name)
        self.kernel = kernel if isinstance(kernel, tuple) else (kernel, kernel)
        self.stride = self.kernel if stride is None else (
            stride if isinstance(stride, tuple) else (stride, stride)
        )
        self.pad = pad if isinstance(pad, tuple) else (pad, pad)

    def forward(self, x, train=False, rng=None):
        n, c, h, w = x.shape
        ho = conv_out_extent(h, self.kernel[0], self.stride[0], self.pad[0], True)
        wo = conv_out_extent(w, self.kernel[1], self.stride[1], self.pad[1], True)
        flat = x.reshape(n * c, 1, h, w)
        cols = im2col_nchw(flat, self.kernel, self.stride, self.pad,
                           floor_mode=True)
        out = cols.astype(np.float64).mean(axis=1).astype(x.dtype)
        self._cache = (x.shape, cols.shape)
        return out.reshape(n, c, ho, wo)

    def backward(self, dy):
        in_shape, cols_shape = self._cache
        n, c, h, w = in_shape
        denom = self.kernel[0] * self.kernel[1]
        dcols = np.broadcast_to(
            dy.reshape(n * c, 1, -1) / denom, cols_shape
        ).astype(dy.dtype)
        dx = col2im_nchw(dcols, (n * c, 1, h, w), self.kernel, self.stride,
                         self.pad, floor_mode=True)
        return dx.reshape(in_shape)


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class FullyConnected(Layer):
    """Affine map on [N,D] inputs."""

    kind = "FullyConnected"

    def __init__(self, name, in_features, out_features, dtype=np.float32):
        super().__init__(name)
        self.din = in_features
        self.dout = out_features
        self.params["weight"] = np.zeros((in_features, out_features), dtype)
        self.params["bias"] = np.zeros((out_features,), dtype)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.din:
            raise ShapeMismatchError(
                f"{self.name}: expected input [N,{self.din}], got {x.shape}"
            )
        self._x = x
        out = matmul(x, self.params["weight"])
        return out + self.params["bias"].astype(out.dtype)

    def backward(self, dy):
        self.grads["weight"] += matmul(self._x.T, dy).astype(
            self.params["weight"].dtype
        )
        self.grads["bias"] += dy.astype(np.float64).sum(axis=0).astype(
            self.params["bias"].dtype
        )
        return matmul(dy, self.params["weight"].T).astype(dy.dtype, copy=False)


class Dropout(Layer):
    """Inverted dropout: train mode scales survivors by 1/(1-ratio), eval is identity."""

    kind = "Dropout"

    def __init__(self, name, ratio=0.5):
        super().__init__(name)
        if not 0.0 < ratio < 1.0:
            raise ValueError(f"{name}: dropout ratio must be in (0,1), got {ratio}")
        self.ratio = ratio

    def forward(self, x, train=False, rng=None):
        if not train:
            self._mask = None
            return x
        if rng is None:
            raise ValueError(f"{self.name}: train-mode dropout needs an RNG stream")
        keep = rng.random(x.shape) >= self.ratio
        self._mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.ratio)
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class Concat(Layer):
    """Channel-axis concatenation of [N,Ci,H,W] inputs in argument order."""

    kind = "Concat"

    def forward(self, xs, train=False, rng=None):
        base = xs[0]
        for x in xs[1:]:
            if x.shape[0] != base.shape[0] or x.shape[2:] != base.shape[2:]:
                raise ShapeMismatchError(
                    f"{self.name}: spatial/batch mismatch {base.shape} vs {x.shape}"
                )
        self._splits = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1)

    def backward(self, dy):
        out = []
        start = 0
        for c in self._splits:
            out.append(dy[:, start:start + c])
            start += c
        return out


class Inception(Layer):
    """Four-branch inception module: 1x1; 1x1->3x3; 1x1->5x5; 3x3-maxpool->1x1.

    Branch convolutions preserve H x W (pad 1 for 3x3, pad 2 for 5x5; the
    pool branch uses stride 1, pad 1). Each convolution is followed by ReLU.
    Output channels = b1 + b3 + b5 + bpool.
    """

    kind = "Inception"

    def __init__(self, name, in_channels, b1, b3r, b3, b5r, b5, bpool,
                 dtype=np.float32):
        super().__init__(name)
        self.cin = in_channels
        self.spec = (b1, b3r, b3, b5r, b5, bpool)
        self._sub = {
            "1x1": Conv2D("1x1", in_channels, b1, 1, dtype=dtype),
            "3x3_reduce": Conv2D("3x3_reduce", in_channels, b3r, 1, dtype=dtype),
            "3x3": Conv2D("3x3", b3r, b3, 3, pad=1, dtype=dtype),
            "5x5_reduce": Conv2D("5x5_reduce", in_channels, b5r, 1, dtype=dtype),
            "5x5": Conv2D("5x5", b5r, b5, 5, pad=2, dtype=dtype),
            "pool": MaxPool("pool", 3, stride=1, pad=1),
            "pool_proj": Conv2D("pool_proj", in_channels, bpool, 1, dtype=dtype),
        }
        self._relus = {key: ReLU(key + "_relu") for key in
                       ("1x1", "3x3_reduce", "3x3", "5x5_reduce", "5x5", "pool_proj")}
        self._concat = Concat("concat")
        for sub_name, sub in self._sub.items():
            for slot, arr in sub.params.items():
                self.params[f"{sub_name}.{slot}"] = arr

    def out_channels(self, in_channels):
        b1, _, b3, _, b5, bpool = self.spec
        return b1 + b3 + b5 + bpool

    def _conv(self, key, x):
        return self._relus[key].forward(self._sub[key].forward(x))

    def forward(self, x, train=False, rng=None):
        y1 = self._conv("1x1", x)
        y3 = self._conv("3x3", self._conv("3x3_reduce", x))
        y5 = self._conv("5x5", self._conv("5x5_reduce", x))
        yp = self._conv("pool_proj", self._sub["pool"].forward(x))
        return self._concat.forward([y1, y3, y5, yp])

    def backward(self, dy):
        d1, d3, d5, dp = self._concat.backward(dy)
        dx = self._sub["1x1"].backward(self._relus["1x1"].backward(d1))
        d3 = self._sub["3x3"].backward(self._relus["3x3"].backward(d3))
        dx += self._sub["3x3_reduce"].backward(self._relus["3x3_reduce"].backward(d3))
        d5 = self._sub["5x5"].backward(self._relus["5x5"].backward(d5))
        dx += self._sub["5x5_reduce"].backward(self._relus["5x5_reduce"].backward(d5))
        dp = self._sub["pool_proj"].backward(self._relus["pool_proj"].backward(dp))
        dx += self._sub["pool"].backward(dp)
        return dx

    def zero_grads(self):
        for sub_name, sub in self._sub.items():
            sub.zero_grads()
            for slot in sub.params:
                self.grads[f"{sub_name}.{slot}"] = sub.grads[slot]


class ClassIndexError(ValueError):
    """A label lies outside [0, K)."""


def softmax_xent(logits, labels):
    """Softmax + cross-entropy, mean over the batch.

    Returns (loss, probabilities, dlogits) where dlogits = (p - onehot)/N.
    Row maxima are subtracted before exponentiation for stability.
    """
    logits = np.asarray(logits)
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ClassIndexError(f"label {bad} outside [0, {k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(-np.log(p[rows, labels]).mean())
    grad = p.copy()
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, p.astype(logits.dtype), grad.astype(logits.dtype)
