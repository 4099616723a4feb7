"""Synthetic desk-scale leaf corpus.

Each crop maps to a base leaf hue and ellipse shape family; each disease to
a deterministic spot overlay (count, size, color). Every synthetic "leaf"
is rendered one to three times under rotation, the renderings sharing a
leaf group id. Backgrounds are low-saturation textured gray/brown so the
saturation-based segmentation has a real job to do, and a ground-truth
foreground mask is written for every image.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from .data_pipeline import SampleRecord, save_manifest, load_registry
from .segmentation import hsb_to_rgb


def _crop_hue(crop_idx):
    # 14 hues spread evenly over the circle.
    return (85.0 + crop_idx * 360.0 / 14.0) % 360.0


def _disease_style(disease_idx):
    # Golden-angle hue spacing keeps same-crop diseases (adjacent indices)
    # far apart on the color circle.
    hue = (200.0 + disease_idx * 137.508) % 360.0
    count = 2 + disease_idx % 3
    radius = 0.16 + 0.04 * (disease_idx % 3)
    value = 0.35 + 0.3 * (disease_idx % 2)
    return hue, count, radius, value


def _render(size, crop_idx, disease_idx, leaf_rng, angle, bg_rng):
    """Render one image + ground-truth mask analytically on rotated coords."""
    lin = np.linspace(-1.0, 1.0, size)
    xx, yy = np.meshgrid(lin, lin)
    ca, sa = np.cos(angle), np.sin(angle)
    xr = ca * xx + sa * yy
    yr = -sa * xx + ca * yy

    aspect = 0.55 + 0.35 * (crop_idx % 5) / 4.0
    rx = 0.78 + 0.08 * leaf_rng.random()
    ry = rx * aspect
    leaf = (xr / rx) ** 2 + (yr / ry) ** 2 <= 1.0

    # Background: dim, low-saturation texture.
    base_v = 0.40 + 0.15 * bg_rng.random()
    coarse = bg_rng.random((size // 8, size // 8))
    noise = np.kron(coarse, np.ones((8, 8)))[:size, :size]
    bg_h = np.full((size, size), 30.0 + 30.0 * bg_rng.random())
    bg_s = np.full((size, size), 0.02 + 0.04 * bg_rng.random())
    bg_v = np.clip(base_v + 0.06 * (noise - 0.5), 0.05, 0.95)

    leaf_h = np.full((size, size), _crop_hue(crop_idx) + leaf_rng.uniform(-3.0, 3.0))
    leaf_s = np.full((size, size), 0.75 + 0.15 * leaf_rng.random())
    leaf_v = np.full((size, size), 0.55 + 0.15 * leaf_rng.random())
    # Central vein: slightly darker stripe along the leaf axis.
    vein = np.abs(yr) < 0.02
    leaf_v = np.where(vein, leaf_v * 0.85, leaf_v)

    h = np.where(leaf, leaf_h, bg_h)
    s = np.where(leaf, leaf_s, bg_s)
    v = np.where(leaf, leaf_v, bg_v)

    if disease_idx is not None:
        spot_h, count, radius, spot_v = _disease_style(disease_idx)
        for _ in range(count):
            sx = leaf_rng.uniform(-0.5, 0.5) * rx
            sy = leaf_rng.uniform(-0.5, 0.5) * ry
            spot = ((xr - sx) ** 2 + (yr - sy) ** 2 <= radius ** 2) & leaf
            h = np.where(spot, spot_h, h)
            s = np.where(spot, 0.9, s)
            v = np.where(spot, spot_v, v)

    rgb = hsb_to_rgb(np.stack([h, s, v], axis=-1))
    img = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    return img, leaf


def _group_sizes(total, rng):
    """Partition `total` into sizes from {1,2,3} with at least one size > 1."""
    sizes = []
    remaining = total
    while remaining > 0:
        size = min(int(rng.integers(1, 4)), remaining)
        sizes.append(size)
        remaining -= size
    if total >= 2 and all(s == 1 for s in sizes):
        sizes = [2] + sizes[2:]
    return sizes


def gen_minivillage(out_dir, seed=0, images_per_class=10, size=64,
                    label_by_crop=False, registry=None):
    """Generate the synthetic surrogate corpus under out_dir.

    Writes images/, masks/ and manifest.csv; returns the SampleRecords.
    The same seed reproduces the corpus bitwise. ``label_by_crop`` relabels
    records by crop only (for surrogate pretraining); rendering is identical.
    """
    if size not in (32, 64):
        raise ValueError(f"unsupported corpus image size {size} (use 32 or 64)")
    registry = registry or load_registry()
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    mask_dir = out_dir / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)

    crops = registry.crops
    diseases = registry.diseases
    records = []
    for entry in registry.entries:
        crop_idx = crops.index(entry.crop)
        disease_idx = None if entry.disease == "healthy" else diseases.index(entry.disease)
        class_rng = np.random.default_rng([seed, entry.class_id])
        sizes = _group_sizes(images_per_class, class_rng)
        img_idx = 0
        for gidx, gsize in enumerate(sizes):
            leaf_seed = [seed, entry.class_id, gidx]
            group_id = f"c{entry.class_id:02d}g{gidx:03d}" if gsize > 1 else None
            for view in range(gsize):
                # One stream per leaf so all views share leaf geometry draws.
                leaf_rng = np.random.default_rng(leaf_seed)
                bg_rng = np.random.default_rng([seed, entry.class_id, gidx, view, 7])
                angle = 0.0 if view == 0 else float(
                    np.random.default_rng(leaf_seed + [view]).uniform(0.3, 2 * np.pi - 0.3)
                )
                img, mask = _render(size, crop_idx, disease_idx, leaf_rng, angle, bg_rng)
                stem = f"{entry.class_id:02d}_{img_idx:03d}"
                img_path = img_dir / f"{stem}.png"
                Image.fromarray(img).save(img_path, format="PNG")
                Image.fromarray((mask * np.uint8(255))).save(
                    mask_dir / f"{stem}.png", format="PNG"
                )
                class_id = (crops.index(entry.crop) if label_by_crop
                            else entry.class_id)
                records.append(SampleRecord(str(img_path), class_id, group_id))
                img_idx += 1
    if not label_by_crop:
        save_manifest(records, out_dir / "manifest.csv", registry)
    return records
