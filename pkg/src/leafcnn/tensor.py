"""Dense tensor kernels: matmul and im2col/col2im.

Tensors are plain numpy arrays in row-major N-C-H-W order, float32 for
storage. Reductions accumulate in float64 and round back to the input
dtype so that gradient checks stay meaningful at 32-bit storage.
"""

import numpy as np

__all__ = [
    "ShapeMismatchError",
    "GeometryError",
    "matmul",
    "conv_out_extent",
    "im2col",
    "col2im",
    "im2col_nchw",
    "col2im_nchw",
]


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """Convolution/pooling geometry does not yield integral output extents."""


def matmul(a, b):
    """Matrix product of two rank-2 tensors, accumulated in float64.

    Raises ShapeMismatchError naming both shapes if the inner extents differ.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(
            f"matmul requires rank-2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    out_dtype = np.result_type(a.dtype, b.dtype)
    out = np.dot(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return out.astype(out_dtype, copy=False)


def conv_out_extent(extent, kernel, stride, pad, floor_mode=False):
    """Output extent of a sliding window.

    Strict mode (default) raises GeometryError when the window grid does not
    tile the input exactly; floor mode discards the ragged border instead
    (the convention of the reference architectures' stride-2 stages).
    """
    span = extent + 2 * pad - kernel
    if span < 0 or (not floor_mode and span % stride != 0):
        raise GeometryError(
            f"window geometry (extent={extent}, kernel={kernel}, "
            f"stride={stride}, pad={pad}) has no integral output extent"
        )
    return span // stride + 1


def im2col_nchw(x, kernel, stride, pad, pad_value=0.0, floor_mode=False):
    """Batched im2col: [N,C,H,W] -> [N, C*kh*kw, Hout*Wout].

    Column j of each batch slice holds the flattened receptive field of
    output position j (row-major over the output grid); padded positions
    read as pad_value.
    """
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    ho = conv_out_extent(h, kh, sh, ph, floor_mode)
    wo = conv_out_extent(w, kw, sw, pw, floor_mode)
    if ph or pw:
        xp = np.full((n, c, h + 2 * ph, w + 2 * pw), pad_value, dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im_nchw(cols, in_shape, kernel, stride, pad, floor_mode=False):
    """Adjoint of im2col_nchw: sums overlapping contributions back to [N,C,H,W]."""
    n, c, h, w = in_shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    ho = conv_out_extent(h, kh, sh, ph, floor_mode)
    wo = conv_out_extent(w, kw, sw, pw, floor_mode)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, :, i, j]
    if ph or pw:
        return xp[:, :, ph:ph + h, pw:pw + w].copy()
    return xp


def im2col(x, kernel, stride=(1, 1), pad=(0, 0)):
    """Single-image im2col: [C,H,W] -> [C*kh*kw, Hout*Wout]."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeMismatchError(f"im2col expects a rank-3 [C,H,W] input, got {x.shape}")
    out = im2col_nchw(x[None], kernel, stride, pad)
    return out[0]


def col2im(cols, in_shape, kernel, stride=(1, 1), pad=(0, 0)):
    """Adjoint of im2col for a single [C,H,W] image."""
    cols = np.asarray(cols)
    c, h, w = in_shape
    return col2im_nchw(cols[None], (1, c, h, w), kernel, stride, pad)[0]
