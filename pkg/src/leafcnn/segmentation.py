"""Leaf/background segmentation from color, lightness and saturation masks
in the Lab and HSB color spaces, plus gray-world color-cast correction.

All pixel operations accept either a single (r, g, b) triple or an array
whose last axis has length 3; channels are in [0, 1] unless stated.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import ShapeMismatchError

# D65 reference white and the sRGB -> XYZ matrix (linear-light).
_WHITE = np.array([0.95047, 1.0, 1.08883])
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_LAB_EPS = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0


@dataclass(frozen=True)
class SegmentationParams:
    saturation_min: float = 0.15
    brightness_lo: float = 0.1
    brightness_hi: float = 0.98
    a_max: float = -5.0          # Lab a threshold: below = green-leaning
    radius: int = 2              # morphological opening/closing radius
    largest_component: bool = True

    def __post_init__(self):
        if not 0.0 <= self.saturation_min <= 1.0:
            raise ValueError(f"saturation_min outside [0,1]: {self.saturation_min}")
        if not 0.0 <= self.brightness_lo <= self.brightness_hi <= 1.0:
            raise ValueError(
                f"bad brightness band [{self.brightness_lo}, {self.brightness_hi}]"
            )
        if self.radius < 0:
            raise ValueError(f"radius must be nonnegative: {self.radius}")


def rgb_to_hsb(rgb):
    """Hexcone RGB -> (hue degrees [0,360), saturation, brightness).

    Hue is undefined at zero saturation and reported as 0 there.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = np.maximum(np.maximum(r, g), b)
    cmin = np.minimum(np.minimum(r, g), b)
    delta = v - cmin
    s = np.where(v > 0, delta / np.where(v > 0, v, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        dsafe = np.where(delta > 0, delta, 1.0)
        hr = np.mod((g - b) / dsafe, 6.0)
        hg = (b - r) / dsafe + 2.0
        hb = (r - g) / dsafe + 4.0
    h = np.where(v == r, hr, np.where(v == g, hg, hb))
    h = np.where(delta > 0, h * 60.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsb_to_rgb(hsb):
    """Inverse hexcone transform."""
    hsb = np.asarray(hsb, dtype=np.float64)
    h, s, v = hsb[..., 0], hsb[..., 1], hsb[..., 2]
    hp = np.mod(h, 360.0) / 60.0
    c = v * s
    x = c * (1.0 - np.abs(np.mod(hp, 2.0) - 1.0))
    zero = np.zeros_like(c)
    sector = np.floor(hp).astype(int) % 6
    r1 = np.choose(sector, [c, x, zero, zero, x, c])
    g1 = np.choose(sector, [x, c, c, x, zero, zero])
    b1 = np.choose(sector, [zero, zero, x, c, c, x])
    m = v - c
    return np.stack([r1 + m, g1 + m, b1 + m], axis=-1)


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def rgb_to_lab(rgb):
    """sRGB -> CIELAB under D65: gamma expansion, XYZ, then L*a*b*."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = _srgb_to_linear(rgb)
    xyz = lin @ _RGB2XYZ.T
    t = xyz / _WHITE
    f = np.where(t > _LAB_EPS, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)
    l = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([l, a, b], axis=-1)


def lab_to_rgb(lab):
    """CIELAB -> sRGB under D65 (inverse of rgb_to_lab)."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    f3 = f ** 3
    t = np.where(f3 > _LAB_EPS, f3, (116.0 * f - 16.0) / _LAB_KAPPA)
    xyz = t * _WHITE
    lin = xyz @ _XYZ2RGB.T
    return _linear_to_srgb(lin)


def fix_color_cast(image):
    """Gray-world cast correction.

    Scales each channel by mean(channel means)/channel mean and clamps to
    [0,1]. Returns (corrected, degenerate): when any channel mean is zero the
    image comes back unchanged with the flag set.
    """
    image = np.asarray(image, dtype=np.float32)
    means = image.reshape(-1, 3).mean(axis=0, dtype=np.float64)
    if np.any(means == 0.0):
        return image, True
    scales = means.mean() / means
    out = np.clip(image * scales.astype(np.float32), 0.0, 1.0)
    return out.astype(np.float32), False


def _disk(radius):
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (xx * xx + yy * yy) <= radius * radius


_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def compute_leaf_mask(image, params=None):
    """Binary leaf mask for an [H,W,3] RGB image in [0,1].

    Rule: (saturation > s0 AND brightness within the band) OR (Lab a below
    the green threshold), then morphological opening and closing with a disk
    of the configured radius, then (optionally) the largest 4-connected
    foreground component.
    """
    params = params or SegmentationParams()
    image = np.asarray(image, dtype=np.float32)
    hsb = rgb_to_hsb(image)
    lab_a = rgb_to_lab(image)[..., 1]
    s = hsb[..., 1]
    v = hsb[..., 2]
    mask = ((s > params.saturation_min)
            & (v >= params.brightness_lo)
            & (v <= params.brightness_hi)) | (lab_a < params.a_max)
    if params.radius > 0:
        disk = _disk(params.radius)
        mask = ndimage.binary_opening(mask, structure=disk)
        mask = ndimage.binary_closing(mask, structure=disk)
    if params.largest_component and mask.any():
        labels, n = ndimage.label(mask, structure=_FOUR_CONN)
        if n > 1:
            sizes = np.bincount(labels.ravel())
            sizes[0] = 0
            mask = labels == sizes.argmax()
    return mask.astype(bool)


def apply_mask(image, mask):
    """Zero the background, keep foreground pixel values untouched."""
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise ShapeMismatchError(
            f"image {image.shape} and mask {mask.shape} disagree"
        )
    return np.where(mask[..., None], image, image.dtype.type(0))


def mask_iou(a, b):
    """Intersection-over-union of two binary masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
