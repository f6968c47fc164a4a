"""ROI cropping, boundary targets and joint image/label augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy import ndimage

from .synthdata import FundusSample

# px of Gaussian width per px of crop size (2 px at 128 px)
SIGMA_PER_PIXEL = 2.0 / 128.0


def default_sigma(crop_size: int) -> float:
    return SIGMA_PER_PIXEL * crop_size


def crop_roi(sample: FundusSample, crop_size: int) -> FundusSample:
    """Square crop of side `crop_size` centred on the disc, edge-replicated past the border."""
    if sample.disc_center is None:
        raise ValueError(f"sample {sample.sample_id!r} has no disc_center; cannot crop the ROI")
    h, w = sample.image.shape[:2]
    r0 = int(round(sample.disc_center[0])) - crop_size // 2
    c0 = int(round(sample.disc_center[1])) - crop_size // 2
    pad = (max(0, -r0), max(0, r0 + crop_size - h), max(0, -c0), max(0, c0 + crop_size - w))

    def take(a: np.ndarray) -> np.ndarray:
        widths = [(pad[0], pad[1]), (pad[2], pad[3])] + [(0, 0)] * (a.ndim - 2)
        a = np.pad(a, widths, mode="edge") if any(pad) else a
        rr, cc = r0 + pad[0], c0 + pad[2]
        return a[rr:rr + crop_size, cc:cc + crop_size].copy()

    center = (sample.disc_center[0] - r0, sample.disc_center[1] - c0)
    return replace(
        sample,
        image=take(sample.image),
        od_mask=None if sample.od_mask is None else take(sample.od_mask),
        oc_mask=None if sample.oc_mask is None else take(sample.oc_mask),
        disc_center=center,
    )


@dataclass
class BoundaryTarget:
    map: np.ndarray  # (H, W) float in [0, 1]
    sigma: float


def _contour_band(mask: np.ndarray, sigma: float) -> np.ndarray:
    m = mask.astype(np.float64)
    edges = np.hypot(ndimage.sobel(m, 0, mode="nearest"), ndimage.sobel(m, 1, mode="nearest")) > 0
    band = ndimage.gaussian_filter(edges.astype(np.float64), sigma, mode="constant")
    peak = band.max()
    return band / peak if peak > 0 else band


def make_boundary_target(od_mask: np.ndarray, oc_mask: np.ndarray, sigma: float) -> BoundaryTarget:
    """Soft contour band of disc and cup combined by pixelwise maximum.

    Each mask goes through Sobel magnitude, binarization, Gaussian smoothing and
    peak normalization. All-zero (or constant) masks contribute nothing.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    for name, m in (("od_mask", od_mask), ("oc_mask", oc_mask)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} is not binary")
    if np.any(oc_mask.astype(bool) & ~od_mask.astype(bool)):
        raise ValueError("oc_mask is not contained in od_mask")
    combined = np.maximum(_contour_band(od_mask, sigma), _contour_band(oc_mask, sigma))
    return BoundaryTarget(combined.astype(np.float32), float(sigma))


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentPolicy:
    rotate_p: float = 0.5
    rotate_deg: tuple[float, float] = (-20.0, 20.0)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    elastic_p: float = 0.3
    elastic_grid: int = 4
    elastic_max_frac: float = 0.04  # max displacement / crop size
    contrast_p: float = 0.5
    contrast_range: tuple[float, float] = (0.8, 1.2)
    noise_p: float = 0.3
    noise_sigma: tuple[float, float] = (0.0, 0.03)
    erase_p: float = 0.2
    erase_frac: tuple[float, float] = (0.05, 0.2)  # side / crop size

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith("_p") and not 0.0 <= v <= 1.0:
                raise ValueError(f"{f.name} must lie in [0, 1], got {v}")
            if isinstance(v, (tuple, list)):
                if len(v) != 2 or v[0] > v[1]:
                    raise ValueError(f"{f.name} must be an ordered (lo, hi) pair, got {v}")
        if self.elastic_grid < 2:
            raise ValueError("elastic_grid must be >= 2")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(rotate_p=0, hflip_p=0, vflip_p=0, elastic_p=0, contrast_p=0, noise_p=0, erase_p=0)


class GeometricTransform:
    """A sampled resampling grid shared by every array of one sample."""

    def __init__(self, shape: tuple[int, int], coords: np.ndarray | None):
        self.shape = shape
        self.coords = coords  # (2, H, W) source coordinates, or None for identity

    @property
    def is_identity(self) -> bool:
        return self.coords is None

    def apply(self, array: np.ndarray, order: int = 1, mode: str = "constant") -> np.ndarray:
        if self.coords is None:
            return array.copy()
        if array.ndim == 3:
            return np.stack([self.apply(array[..., c], order, mode) for c in range(array.shape[2])], -1)
        out = ndimage.map_coordinates(array.astype(np.float64), self.coords, order=order, mode=mode)
        return out.astype(array.dtype) if array.dtype.kind == "f" else out

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        if self.coords is None:
            return mask.copy()
        warped = ndimage.map_coordinates(mask.astype(np.float64), self.coords, order=1, mode="constant")
        return (warped >= 0.5).astype(mask.dtype)


def draw_transform(policy: AugmentPolicy, rng: np.random.Generator, shape: tuple[int, int]) -> GeometricTransform:
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    touched = False

    # compose output->input mapping: flips, then rotation, then elastic offsets
    src_r, src_c = rows, cols
    if rng.random() < policy.hflip_p:
        src_c = (w - 1) - src_c
        touched = True
    if rng.random() < policy.vflip_p:
        src_r = (h - 1) - src_r
        touched = True
    if rng.random() < policy.rotate_p:
        theta = math.radians(rng.uniform(*policy.rotate_deg))
        c, s = math.cos(theta), math.sin(theta)
        dr, dc = src_r - cy, src_c - cx
        src_r, src_c = cy + c * dr - s * dc, cx + s * dr + c * dc
        touched = True
    if rng.random() < policy.elastic_p:
        g = policy.elastic_grid
        amp = policy.elastic_max_frac * min(h, w)
        coarse = rng.uniform(-amp, amp, size=(2, g, g))
        dense = np.stack([ndimage.zoom(coarse[i], (h / g, w / g), order=3, mode="nearest")[:h, :w]
                          for i in range(2)])
        # cubic zoom can overshoot the coarse bound
        dense = np.clip(dense, -amp, amp)
        src_r, src_c = src_r + dense[0], src_c + dense[1]
        touched = True
    return GeometricTransform(shape, np.stack([src_r, src_c]) if touched else None)


def rotation_transform(shape: tuple[int, int], degrees: float) -> GeometricTransform:
    policy = replace(AugmentPolicy.disabled(), rotate_p=1.0, rotate_deg=(degrees, degrees))
    return draw_transform(policy, np.random.default_rng(0), shape)


def augment(
    sample: FundusSample,
    boundary: BoundaryTarget | None,
    policy: AugmentPolicy,
    rng_seed: int,
) -> tuple[FundusSample, BoundaryTarget | None]:
    """Apply one random draw of `policy` jointly to image, masks and boundary.

    Geometric transforms touch everything; contrast, noise and erasing only the
    image. Works on unlabeled samples (masks and boundary None).
    """
    policy.validate()
    rng = np.random.default_rng(rng_seed)
    h, w = sample.image.shape[:2]
    tf = draw_transform(policy, rng, (h, w))

    image = tf.apply(sample.image, order=1, mode="nearest")
    od = None if sample.od_mask is None else tf.apply_mask(sample.od_mask)
    oc = None if sample.oc_mask is None else tf.apply_mask(sample.oc_mask)
    new_boundary = None
    if boundary is not None:
        new_boundary = BoundaryTarget(np.clip(tf.apply(boundary.map, order=1), 0, 1), boundary.sigma)

    if rng.random() < policy.contrast_p:
        factor = rng.uniform(*policy.contrast_range)
        mean = image.mean(axis=(0, 1), keepdims=True)
        image = (image - mean) * factor + mean
    if rng.random() < policy.noise_p:
        image = image + rng.normal(0.0, rng.uniform(*policy.noise_sigma), image.shape)
    if rng.random() < policy.erase_p:
        eh = max(1, int(round(rng.uniform(*policy.erase_frac) * h)))
        ew = max(1, int(round(rng.uniform(*policy.erase_frac) * w)))
        r0 = int(rng.integers(0, h - eh + 1))
        c0 = int(rng.integers(0, w - ew + 1))
        image = image.copy()
        image[r0:r0 + eh, c0:c0 + ew] = rng.uniform(0, 1, 3)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    center = sample.disc_center
    return replace(sample, image=image, od_mask=od, oc_mask=oc, disc_center=center), new_boundary
