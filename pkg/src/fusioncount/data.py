"""Synthetic crowd scenes, ground-truth densities, patch cropping, the toy
training loss and count metrics."""
from dataclasses import dataclass

import numpy as np

# conventional ImageNet statistics used by VGG pipelines
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

COUNT_LOSS_WEIGHT = 0.01


@dataclass
class SyntheticScene:
    image: np.ndarray        # (1, 3, H, W) in [0, 1]
    annotations: np.ndarray  # (N, 2) head points as (row, col) pixel coordinates
    density_gt: np.ndarray   # (1, 1, H/2, W/2)

    @property
    def count(self):
        return len(self.annotations)


def normalize_image(image):
    """Per-channel standardisation of a ``(n, 3, h, w)`` image in [0, 1]."""
    mean = np.asarray(IMAGENET_MEAN, dtype=image.dtype)[None, :, None, None]
    std = np.asarray(IMAGENET_STD, dtype=image.dtype)[None, :, None, None]
    return (image - mean) / std


def blob_radius(rows, height):
    """Head radius in pixels, growing from the top of the frame to the bottom."""
    r_min = max(1.0, height / 96.0)
    r_max = max(3.0, height / 24.0)
    return r_min + (r_max - r_min) * (np.asarray(rows, dtype=np.float64) / max(height - 1, 1))


def rasterize_density(points, sigmas, shape):
    """Sum of per-point Gaussians on a ``shape`` grid, each renormalised to unit
    mass over the pixels it covers inside the grid.

    ``points`` are ``(row, col)`` in the grid's own pixel coordinates.
    """
    h, w = shape
    density = np.zeros((h, w), dtype=np.float64)
    for (r, c), s in zip(points, sigmas):
        rad = int(np.ceil(3 * s))
        r0, r1 = max(int(np.floor(r)) - rad, 0), min(int(np.ceil(r)) + rad + 1, h)
        c0, c1 = max(int(np.floor(c)) - rad, 0), min(int(np.ceil(c)) + rad + 1, w)
        if r0 >= r1 or c0 >= c1:
            # point fell outside the grid: put its mass on the nearest pixel
            density[min(max(int(round(r)), 0), h - 1), min(max(int(round(c)), 0), w - 1)] += 1
            continue
        yy = np.arange(r0, r1)[:, None] - r
        xx = np.arange(c0, c1)[None, :] - c
        k = np.exp(-(yy ** 2 + xx ** 2) / (2 * s * s))
        density[r0:r1, c0:c1] += k / k.sum()
    return density


def _background(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((3, h, w))
    for ch in range(3):
        base = rng.uniform(0.35, 0.65)
        field = np.zeros((h, w))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 4.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img[ch] = base + 0.06 * field + 0.03 * rng.standard_normal((h, w))
    return img


def generate_scene(seed, count_range, height, width):
    """Render a scene with a uniformly drawn head count in ``count_range``.

    Heads are dark Gaussian blobs whose radius shrinks towards the top of the
    frame. The ground truth lives on the half-resolution grid with
    ``sigma = radius / 2`` (half-resolution pixels).
    """
    if height % 2 or width % 2:
        raise ValueError("scene dimensions must be even")
    rng = np.random.default_rng(seed)
    lo, hi = count_range
    n = int(rng.integers(lo, hi + 1))
    rows = rng.uniform(0, height - 1, size=n)
    cols = rng.uniform(0, width - 1, size=n)
    radii = blob_radius(rows, height)

    img = _background(rng, height, width)
    yy, xx = np.mgrid[0:height, 0:width]
    for r, c, rad in zip(rows, cols, radii):
        tone = rng.uniform(0.0, 0.25, size=3)
        ext = int(np.ceil(3 * rad))
        r0, r1 = max(int(r) - ext, 0), min(int(r) + ext + 2, height)
        c0, c1 = max(int(c) - ext, 0), min(int(c) + ext + 2, width)
        d2 = (yy[r0:r1, c0:c1] - r) ** 2 + (xx[r0:r1, c0:c1] - c) ** 2
        alpha = np.exp(-d2 / (2 * rad * rad))[None]
        img[:, r0:r1, c0:c1] = img[:, r0:r1, c0:c1] * (1 - alpha) + tone[:, None, None] * alpha
    img = np.clip(img, 0.0, 1.0)

    points = np.stack([rows, cols], axis=1) if n else np.zeros((0, 2))
    half = (points + 0.5) / 2 - 0.5
    density = rasterize_density(half, radii / 2, (height // 2, width // 2))
    return SyntheticScene(
        image=img[None].astype(np.float32),
        annotations=points,
        density_gt=density[None, None].astype(np.float32),
    )


def crop_patches(scene, k=2, patch_hw=(96, 128), rng=None):
    """``k`` random ``patch_hw`` crops with their half-resolution density windows.

    Corners are drawn on even pixels so the density window starts at exactly
    half the image offsets.
    """
    ph, pw = patch_hw
    _, _, h, w = scene.image.shape
    if ph > h or pw > w:
        raise ValueError(f"patch {ph}x{pw} larger than scene {h}x{w}")
    if ph % 2 or pw % 2:
        raise ValueError("patch dimensions must be even")
    rng = np.random.default_rng() if rng is None else rng
    out = []
    for _ in range(k):
        top = 2 * int(rng.integers(0, (h - ph) // 2 + 1))
        left = 2 * int(rng.integers(0, (w - pw) // 2 + 1))
        img = scene.image[:, :, top:top + ph, left:left + pw]
        den = scene.density_gt[:, :, top // 2:(top + ph) // 2, left // 2:(left + pw) // 2]
        out.append((img, den))
    return out


def loss(pred, gt, count_weight=COUNT_LOSS_WEIGHT):
    """Pixel MSE plus ``count_weight`` x mean absolute per-image count error.

    Returns ``(value, grad_pred)``; the subgradient of ``|.|`` at 0 is 0.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and target {gt.shape} differ")
    diff = pred.astype(np.float64) - gt
    n = pred.shape[0]
    count_err = diff.sum(axis=(1, 2, 3))
    value = np.mean(diff ** 2) + count_weight * np.mean(np.abs(count_err))
    grad = 2 * diff / diff.size + (count_weight / n) * np.sign(count_err)[:, None, None, None]
    return float(value), grad.astype(pred.dtype)


def count_errors(pred_counts, gt_counts):
    """``(MAE, RMSE)`` of total counts."""
    err = np.asarray(pred_counts, dtype=np.float64) - np.asarray(gt_counts, dtype=np.float64)
    if err.size == 0:
        raise ValueError("no counts to evaluate")
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2)))


def relative_error(pred_count, gt_count):
    """Relative count error in percent."""
    return 100.0 * abs(pred_count - gt_count) / gt_count


def evaluate(model, scenes, normalize=True):
    """MAE and RMSE of the model's counts (density sums) over ``scenes``."""
    pred, gt = [], []
    for s in scenes:
        img = normalize_image(s.image) if normalize else s.image
        pred.append(float(model.count(img)[0]))
        gt.append(s.count)
    return count_errors(pred, gt)
