"""Procedural fundus-like images with a photometric domain shift.

Every sample is a pair of nested ellipses (disc and cup) drawn over a textured
background with procedural vessels. Source and target domains share the same
geometry distribution and differ only in appearance, so masks stay valid
across domains while the images drift apart.
"""
from __future__ import annotations

import colorsys
import hashlib
import json
import math
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)

MIN_SIZE = 64
DISC_MARGIN = 4


class DatasetError(RuntimeError):
    """Raised for malformed, missing or inconsistent dataset content."""


@dataclass(frozen=True)
class GeometryParams:
    disc_center: tuple[float, float]  # (row, col)
    disc_radius: float
    cup_radius_ratio: float
    ellipse_eccentricity: float = 0.0
    rotation: float = 0.0

    def semi_axes(self) -> tuple[float, float]:
        """Semi-major and semi-minor axis of the disc ellipse."""
        a = float(self.disc_radius)
        return a, a * math.sqrt(1.0 - self.ellipse_eccentricity**2)

    def validate(self, size: int) -> None:
        if not 0.0 < self.cup_radius_ratio < 1.0:
            raise ValueError(f"cup_radius_ratio must lie in (0, 1), got {self.cup_radius_ratio}")
        if not 0.0 <= self.ellipse_eccentricity <= 0.5:
            raise ValueError(f"ellipse_eccentricity must lie in [0, 0.5], got {self.ellipse_eccentricity}")
        if self.disc_radius <= 0:
            raise ValueError("disc_radius must be positive")
        # axis-aligned half extents of the rotated ellipse
        a, b = self.semi_axes()
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        half_rows = math.sqrt((a * s) ** 2 + (b * c) ** 2)
        half_cols = math.sqrt((a * c) ** 2 + (b * s) ** 2)
        r, col = self.disc_center
        if (
            r - half_rows < DISC_MARGIN
            or r + half_rows > size - 1 - DISC_MARGIN
            or col - half_cols < DISC_MARGIN
            or col + half_cols > size - 1 - DISC_MARGIN
        ):
            raise ValueError(
                f"disc at {self.disc_center} with radius {self.disc_radius} does not fit "
                f"in a {size}px image with a {DISC_MARGIN}px margin"
            )


@dataclass(frozen=True)
class StyleParams:
    base_hue: float = 15.0
    vessel_density: float = 1.0
    brightness_gain: float = 1.0
    contrast_gamma: float = 1.0
    noise_sigma: float = 0.02
    blur_sigma: float = 0.5
    texture_seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"style field {f.name} is not finite")
        if self.vessel_density < 0 or self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("vessel_density, noise_sigma and blur_sigma must be >= 0")
        if self.brightness_gain <= 0 or self.contrast_gamma <= 0:
            raise ValueError("brightness_gain and contrast_gamma must be > 0")


@dataclass
class FundusSample:
    """One RGB image (H, W, 3) in [0, 1] with optional binary disc/cup masks."""

    image: np.ndarray
    od_mask: np.ndarray | None
    oc_mask: np.ndarray | None
    disc_center: tuple[float, float] | None
    domain: str = SOURCE
    sample_id: str = ""

    @property
    def has_labels(self) -> bool:
        return self.od_mask is not None and self.oc_mask is not None

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise DatasetError(f"unknown domain {self.domain!r}")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"image must be HxWx3, got {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise DatasetError("image values outside [0, 1]")
        if not self.has_labels:
            return
        for name in ("od_mask", "oc_mask"):
            m = getattr(self, name)
            if m.shape != self.image.shape[:2]:
                raise DatasetError(f"{name} shape {m.shape} != image shape {self.image.shape[:2]}")
            if not np.isin(m, (0, 1)).all():
                raise DatasetError(f"{name} of sample {self.sample_id!r} is not binary")
        if np.any(self.oc_mask.astype(bool) & ~self.od_mask.astype(bool)):
            raise DatasetError(f"cup mask leaves the disc mask in sample {self.sample_id!r}")


def ellipse_mask(size: int, center, semi_major: float, semi_minor: float, rotation: float) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    return _ellipse_radius(rows, cols, center, semi_major, semi_minor, rotation) <= 1.0


def _ellipse_radius(rows, cols, center, a, b, rotation):
    """Normalized elliptic radius: 1 on the contour, < 1 inside."""
    dr = rows - center[0]
    dc = cols - center[1]
    c, s = math.cos(rotation), math.sin(rotation)
    u = dc * c + dr * s
    v = -dc * s + dr * c
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def rasterize_geometry(geometry: GeometryParams, size: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = geometry.semi_axes()
    k = geometry.cup_radius_ratio
    od = ellipse_mask(size, geometry.disc_center, a, b, geometry.rotation)
    oc = ellipse_mask(size, geometry.disc_center, a * k, b * k, geometry.rotation)
    if np.any(oc & ~od):
        raise ValueError("rasterized cup escapes the disc")
    return od.astype(np.uint8), oc.astype(np.uint8)


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _vessel_map(rng: np.random.Generator, geometry: GeometryParams, size: int, density: float) -> np.ndarray:
    canvas = np.zeros((size, size))
    n_vessels = int(round(6 * density))
    r0, c0 = geometry.disc_center
    for _ in range(n_vessels):
        theta = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(0.6, 1.4)
        pos = np.array([r0, c0], dtype=np.float64) + rng.normal(0, geometry.disc_radius * 0.15, 2)
        curvature = rng.normal(0, 0.006)
        for _ in range(2 * size):
            theta += curvature + rng.normal(0, 0.02)
            pos += (math.sin(theta), math.cos(theta))
            i, j = int(round(pos[0])), int(round(pos[1]))
            if not (0 <= i < size and 0 <= j < size):
                break
            canvas[i, j] = max(canvas[i, j], width)
    vessels = ndimage.gaussian_filter(canvas, 0.9)
    return np.clip(vessels * 2.5, 0.0, 1.0)


def _hsv(h_deg: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((h_deg % 360.0) / 360.0, s, v))


def render_image(seed: int, geometry: GeometryParams, style: StyleParams, size: int) -> np.ndarray:
    """Draw the RGB image; `seed` drives vessels, `style.texture_seed` the texture."""
    a, b = geometry.semi_axes()
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    rho = _ellipse_radius(rows, cols, geometry.disc_center, a, b, geometry.rotation)
    # signed distance in pixels, approximate (exact on circles)
    disc_alpha = 1.0 / (1.0 + np.exp((rho - 1.0) * a / 1.2))
    k = geometry.cup_radius_ratio
    cup_alpha = 1.0 / (1.0 + np.exp((rho - k) * a / 2.5))

    hue = style.base_hue
    bg = _hsv(hue, 0.85, 0.62)
    disc = _hsv(hue + 22.0, 0.6, 0.92)
    cup = _hsv(hue + 35.0, 0.3, 1.0)

    img = bg * (1 - disc_alpha[..., None]) + disc * disc_alpha[..., None]
    img = img * (1 - 0.75 * cup_alpha[..., None]) + cup * 0.75 * cup_alpha[..., None]

    tex_rng = np.random.default_rng(style.texture_seed)
    texture = _smooth_noise(tex_rng, size, size / 12.0)
    img = img * (1.0 + 0.08 * texture[..., None])

    rng = np.random.default_rng(seed)
    vessels = _vessel_map(rng, geometry, size, style.vessel_density)
    vessel_color = _hsv(hue - 5.0, 0.9, 0.35)
    img = img * (1 - 0.6 * vessels[..., None]) + vessel_color * 0.6 * vessels[..., None]

    dist = np.hypot(rows - size / 2, cols - size / 2) / (size / 2)
    img = img * (1.0 - 0.25 * dist**2)[..., None]

    img = np.clip(img * style.brightness_gain, 0.0, 1.0) ** style.contrast_gamma
    if style.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, (style.blur_sigma, style.blur_sigma, 0))
    if style.noise_sigma > 0:
        img = img + tex_rng.normal(0.0, style.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_sample(
    seed: int,
    geometry: GeometryParams,
    style: StyleParams,
    size: int,
    domain: str = SOURCE,
    sample_id: str = "",
) -> FundusSample:
    if size < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE}, got {size}")
    geometry.validate(size)
    style.validate()
    od, oc = rasterize_geometry(geometry, size)
    image = render_image(seed, geometry, style, size).astype(np.float32)
    sample = FundusSample(image, od, oc, tuple(map(float, geometry.disc_center)), domain, sample_id)
    sample.validate()
    return sample


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class StyleRange:
    """Closed [lo, hi] range per style field; samples draw uniformly inside."""

    base_hue: tuple[float, float] = (10.0, 20.0)
    vessel_density: tuple[float, float] = (0.8, 1.2)
    brightness_gain: tuple[float, float] = (0.9, 1.1)
    contrast_gamma: tuple[float, float] = (0.9, 1.1)
    noise_sigma: tuple[float, float] = (0.01, 0.03)
    blur_sigma: tuple[float, float] = (0.4, 0.8)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if not lo <= hi:
                raise ValueError(f"style range {f.name} has lo > hi: {(lo, hi)}")
            object.__setattr__(self, f.name, (float(lo), float(hi)))

    def draw(self, rng: np.random.Generator) -> StyleParams:
        values = {f.name: float(rng.uniform(*getattr(self, f.name))) for f in fields(self)}
        return StyleParams(**values, texture_seed=int(rng.integers(0, 2**31 - 1)))


# per-field scale used to put style gaps on a common footing
_STYLE_SCALE = {
    "base_hue": 30.0,
    "vessel_density": 1.0,
    "brightness_gain": 0.5,
    "contrast_gamma": 0.5,
    "noise_sigma": 0.05,
    "blur_sigma": 2.0,
}


def shift_magnitude(a: StyleRange, b: StyleRange) -> float:
    """Scaled L1 distance between the midpoints of two style ranges."""
    total = 0.0
    for f in fields(a):
        ma = sum(getattr(a, f.name)) / 2
        mb = sum(getattr(b, f.name)) / 2
        total += abs(ma - mb) / _STYLE_SCALE[f.name]
    return total


TARGET_STYLE_DEFAULT = StyleRange(
    base_hue=(28.0, 40.0),
    vessel_density=(0.8, 1.2),
    brightness_gain=(0.55, 0.7),
    contrast_gamma=(1.2, 1.4),
    noise_sigma=(0.03, 0.05),
    blur_sigma=(1.5, 2.5),
)


@dataclass
class DatasetConfig:
    n_source: int = 32
    n_target: int = 32
    n_target_test: int = 0
    size: int = 160
    seed: int = 0
    source_style: StyleRange = field(default_factory=StyleRange)
    target_style: StyleRange = field(default_factory=lambda: TARGET_STYLE_DEFAULT)
    disc_radius: tuple[float, float] = (0.17, 0.22)  # fraction of image size
    cup_radius_ratio: tuple[float, float] = (0.4, 0.7)
    ellipse_eccentricity: tuple[float, float] = (0.0, 0.4)
    center_jitter: float = 0.12  # fraction of image size

    def validate(self) -> None:
        if self.n_source < 1 or self.n_target < 1:
            raise ValueError("n_source and n_target must be >= 1")
        if self.n_target_test < 0:
            raise ValueError("n_target_test must be >= 0")
        if self.size < MIN_SIZE:
            raise ValueError(f"size must be >= {MIN_SIZE}")
        if shift_magnitude(self.source_style, self.target_style) <= 0:
            raise ValueError("source and target style ranges declare no domain shift")
        if not 0 < self.cup_radius_ratio[0] <= self.cup_radius_ratio[1] < 1:
            raise ValueError("cup_radius_ratio range must lie inside (0, 1)")


def sample_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def _draw_geometry(rng: np.random.Generator, cfg: DatasetConfig) -> GeometryParams:
    size = cfg.size
    radius = rng.uniform(*cfg.disc_radius) * size
    jitter = cfg.center_jitter * size
    center = (size / 2 + rng.uniform(-jitter, jitter), size / 2 + rng.uniform(-jitter, jitter))
    return GeometryParams(
        disc_center=(round(center[0], 3), round(center[1], 3)),
        disc_radius=round(radius, 3),
        cup_radius_ratio=round(rng.uniform(*cfg.cup_radius_ratio), 4),
        ellipse_eccentricity=round(rng.uniform(*cfg.ellipse_eccentricity), 4),
        rotation=round(rng.uniform(0, np.pi), 4),
    )


def _plan(cfg: DatasetConfig) -> list[dict]:
    """Per-sample record: id, domain, split, seed, geometry, style."""
    plan = []
    groups = [(SOURCE, "train", cfg.n_source, cfg.source_style),
              (TARGET, "train", cfg.n_target, cfg.target_style),
              (TARGET, "test", cfg.n_target_test, cfg.target_style)]
    index = 0
    for domain, split, count, style_range in groups:
        for _ in range(count):
            seed = sample_seed(cfg.seed, index)
            rng = np.random.default_rng(seed)
            geometry = _draw_geometry(rng, cfg)
            style = style_range.draw(rng)
            plan.append({
                "id": f"{domain[:3]}-{split}-{index:05d}",
                "domain": domain,
                "split": split,
                "seed": seed,
                "disc_center": list(geometry.disc_center),
                "geometry": asdict(geometry),
                "style": asdict(style),
            })
            index += 1
    return plan


def _record_sample(record: dict, size: int) -> FundusSample:
    g = dict(record["geometry"])
    g["disc_center"] = tuple(g["disc_center"])
    return generate_sample(record["seed"], GeometryParams(**g), StyleParams(**record["style"]),
                           size, record["domain"], record["id"])


def _write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path, force: bool = False) -> Path:
    """Write images, masks and ``manifest.jsonl`` under `out_dir`."""
    cfg.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"dataset directory {out} exists and is not empty (use force)")
        shutil.rmtree(out)
    for sub in ("images", "od", "oc"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    lines = []
    for record in _plan(cfg):
        sample = _record_sample(record, cfg.size)
        sid = record["id"]
        _write_png(out / "images" / f"{sid}.png", to_uint8(sample.image))
        _write_png(out / "od" / f"{sid}.png", sample.od_mask * 255)
        _write_png(out / "oc" / f"{sid}.png", sample.oc_mask * 255)
        lines.append(json.dumps(record, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return out


def manifest_checksum(path: str | Path) -> str:
    return hashlib.sha256((Path(path) / "manifest.jsonl").read_bytes()).hexdigest()


def read_manifest(path: str | Path) -> list[dict]:
    manifest = Path(path) / "manifest.jsonl"
    if not manifest.is_file():
        raise DatasetError(f"no manifest found at {manifest}")
    records = []
    for n, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{manifest}:{n}: invalid record ({exc})") from None
        for key in ("id", "domain", "disc_center", "seed"):
            if key not in rec:
                raise DatasetError(f"{manifest}:{n}: record lacks {key!r}")
        records.append(rec)
    return records


def _read_mask(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file referenced by manifest: {path}")
    m = np.asarray(Image.open(path))
    if m.ndim != 2 or not np.isin(m, (0, 255)).all():
        raise DatasetError(f"corrupt mask (not binary 0/255): {path}")
    return (m // 255).astype(np.uint8)


def iter_dataset(path: str | Path, domain: str | None = None, split: str | None = None) -> Iterator[FundusSample]:
    root = Path(path)
    for rec in read_manifest(root):
        if domain is not None and rec["domain"] != domain:
            continue
        if split is not None and rec.get("split", "train") != split:
            continue
        img_path = root / "images" / f"{rec['id']}.png"
        if not img_path.is_file():
            raise DatasetError(f"missing file referenced by manifest: {img_path}")
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        od = _read_mask(root / "od" / f"{rec['id']}.png")
        oc = _read_mask(root / "oc" / f"{rec['id']}.png")
        sample = FundusSample(image, od, oc, tuple(map(float, rec["disc_center"])), rec["domain"], rec["id"])
        sample.validate()
        yield sample


def load_dataset(path: str | Path, domain: str | None = None, split: str | None = None) -> list[FundusSample]:
    return list(iter_dataset(path, domain, split))


def histogram_distance(a: Sequence[FundusSample], b: Sequence[FundusSample], bins: int = 32) -> float:
    """Mean per-channel total-variation distance between pooled intensity histograms."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    dists = []
    for ch in range(3):
        ha, _ = np.histogram(np.concatenate([s.image[..., ch].ravel() for s in a]), edges)
        hb, _ = np.histogram(np.concatenate([s.image[..., ch].ravel() for s in b]), edges)
        dists.append(0.5 * np.abs(ha / ha.sum() - hb / hb.sum()).sum())
    return float(np.mean(dists))
