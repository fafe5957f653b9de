"""Synthetic overlapping-particle scenes, augmentation, and dataset I/O.

Scenes are stacks of filled ellipses on a smoothly lit background; particles
drawn later occlude earlier ones, and with probability ``overlap_prob`` a new
particle is chained onto an existing one so the dataset actually exercises
overlap separation.  Ground truth is an instance map from which the binary
region and edge masks are derived.

A generated scene is only accepted when every particle keeps a coherent
visible body and the ground-truth masks themselves survive the segmentation
pipeline with the correct count (occlusion can otherwise erase or bisect a
particle, which would make the count label unlearnable).  Rejected draws are
retried with deterministic sub-seeds, so generation stays a pure function of
(config, seed).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .postprocess import connected_components, segment_pipeline
from .tensor import ShapeError


class DatasetError(RuntimeError):
    """Raised for malformed or missing on-disk datasets."""


@dataclass
class SyntheticSceneConfig:
    height: int = 256
    width: int = 256
    count_range: tuple[int, int] = (2, 3)
    axis_range: tuple[float, float] = (36.0, 48.0)   # ellipse semi-axes, px
    overlap_prob: float = 0.5
    background_range: tuple[float, float] = (0.05, 0.35)
    illumination_max: float = 0.15
    foreground_range: tuple[float, float] = (0.55, 0.95)
    color_jitter: float = 0.08
    noise_level: float = 0.01

    def validate(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("scene size must be at least 16x16")
        k_lo, k_hi = self.count_range
        if not 1 <= k_lo <= k_hi:
            raise ValueError(f"count_range must satisfy 1 <= lo <= hi, got {self.count_range}")
        a_lo, a_hi = self.axis_range
        if not 2.0 <= a_lo <= a_hi:
            raise ValueError(f"axis_range must satisfy 2 <= lo <= hi, got {self.axis_range}")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ValueError(f"overlap_prob must be in [0, 1], got {self.overlap_prob}")
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")
        return self


@dataclass
class Sample:
    image: np.ndarray         # (3, H, W) float32 in [0, 1]
    region_mask: np.ndarray   # (H, W) uint8 in {0, 1}
    edge_mask: np.ndarray     # (H, W) uint8 in {0, 1}
    instance_map: np.ndarray  # (H, W) int32, labels 1..true_count
    true_count: int


def derive_edge_labels(instance_map: np.ndarray, width: int = 2) -> np.ndarray:
    """Edge mask from an instance map.

    A foreground pixel whose 4-neighborhood contains a different label (the
    background counts as a label, so outer boundaries and particle-particle
    seams both qualify) seeds the edge; the seed set is then grown to every
    pixel within Chebyshev distance width-1.  Out-of-image neighbors are not
    compared, so a particle flush against the border has no edge there.
    """
    instance_map = np.asarray(instance_map)
    if instance_map.ndim != 2:
        raise ShapeError(f"derive_edge_labels: expected 2-D map, got {instance_map.shape}")
    if width < 1:
        raise ValueError(f"derive_edge_labels: width must be >= 1, got {width}")
    m = instance_map
    seed = np.zeros(m.shape, dtype=bool)
    seed[1:, :] |= m[1:, :] != m[:-1, :]
    seed[:-1, :] |= m[:-1, :] != m[1:, :]
    seed[:, 1:] |= m[:, 1:] != m[:, :-1]
    seed[:, :-1] |= m[:, :-1] != m[:, 1:]
    seed &= m > 0
    if width > 1:
        se = np.ones((2 * width - 1, 2 * width - 1), dtype=bool)
        seed = ndimage.binary_dilation(seed, structure=se, border_value=0)
    return seed.astype(np.uint8)


def _instances_coherent(instance_map: np.ndarray, count: int, min_pixels: int) -> bool:
    for label in range(1, count + 1):
        body = instance_map == label
        if body.sum() < min_pixels:
            return False
        _, pieces = connected_components(body.astype(np.uint8))
        if pieces != 1:
            return False
    return True


def _draw_scene(cfg: SyntheticSceneConfig, rng: np.random.Generator):
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)

    # background: flat color plus a linear illumination ramp
    base = rng.uniform(*cfg.background_range, size=3).astype(np.float32)
    theta = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0, cfg.illumination_max)
    ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h) - 0.5
    image = base[:, None, None] + (amp * ramp)[None, :, :]

    k = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    instance_map = np.zeros((h, w), dtype=np.int32)
    centers: list[tuple[float, float, float]] = []   # (cy, cx, mean radius)
    luminances: list[float] = []
    for i in range(1, k + 1):
        a = rng.uniform(*cfg.axis_range)
        b = rng.uniform(*cfg.axis_range)
        phi = rng.uniform(0, np.pi)
        r = (a + b) / 2.0
        if centers and rng.uniform() < cfg.overlap_prob:
            # chain onto an existing particle: close enough to overlap,
            # far enough not to swallow it
            cy0, cx0, r0 = centers[int(rng.integers(len(centers)))]
            d = rng.uniform(0.55, 0.9) * (r + r0)
            ang = rng.uniform(0, 2 * np.pi)
            cy, cx = cy0 + d * np.sin(ang), cx0 + d * np.cos(ang)
        else:
            cy = rng.uniform(r, h - r)
            cx = rng.uniform(r, w - r)
        cy = float(np.clip(cy, r * 0.7, h - 1 - r * 0.7))
        cx = float(np.clip(cx, r * 0.7, w - 1 - r * 0.7))

        dx, dy = xx - cx, yy - cy
        u = (dx * np.cos(phi) + dy * np.sin(phi)) / a
        v = (-dx * np.sin(phi) + dy * np.cos(phi)) / b
        body = (u * u + v * v) <= 1.0
        instance_map[body] = i
        centers.append((cy, cx, r))

        # particles need contrast against their chained neighbor for the seam
        # to be visible at all
        for _ in range(16):
            lum = rng.uniform(*cfg.foreground_range)
            if all(abs(lum - other) >= 0.08 for other in luminances):
                break
        luminances.append(lum)
        color = np.clip(lum + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3), 0, 1)
        image[:, body] = color.astype(np.float32)[:, None]

    if cfg.noise_level > 0:
        image = image + rng.normal(0, cfg.noise_level, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, instance_map, k


def generate_scene(cfg: SyntheticSceneConfig, seed: int, max_attempts: int = 100) -> Sample:
    """Generate one labeled scene, deterministically from (cfg, seed)."""
    cfg.validate()
    min_pixels = max(16, int(0.15 * np.pi * cfg.axis_range[0] ** 2))
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        image, instance_map, k = _draw_scene(cfg, rng)
        if not _instances_coherent(instance_map, k, min_pixels):
            continue
        region = (instance_map > 0).astype(np.uint8)
        edge = derive_edge_labels(instance_map)
        oracle = segment_pipeline(region.astype(np.float32), edge.astype(np.float32))
        if oracle.count != k:
            continue
        return Sample(image, region, edge, instance_map, k)
    raise RuntimeError(f"generate_scene: no separable scene in {max_attempts} attempts "
                       f"for seed {seed}; config is likely too crowded")


def generate_dataset(cfg: SyntheticSceneConfig, n: int, base_seed: int) -> list[Sample]:
    """n scenes with per-sample seeds base_seed + index."""
    return [generate_scene(cfg, base_seed + i) for i in range(n)]


# -- augmentation ---------------------------------------------------------------

@dataclass
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    rot_quarters: int = 0     # multiples of 90 degrees, 0..3
    noise_std: float = 0.0
    noise_seed: int = 0
    contrast: float = 1.0


def draw_augment_params(seed, noise_max: float = 0.02,
                        contrast_range: tuple[float, float] = (0.7, 1.3)) -> AugmentParams:
    rng = np.random.default_rng(seed)
    return AugmentParams(
        hflip=bool(rng.uniform() < 0.5),
        vflip=bool(rng.uniform() < 0.5),
        rot_quarters=int(rng.integers(0, 4)),
        noise_std=float(rng.uniform(0, noise_max)),
        noise_seed=int(rng.integers(0, 2 ** 31)),
        contrast=float(rng.uniform(*contrast_range)),
    )


def apply_augment(sample: Sample, params: AugmentParams) -> Sample:
    """Geometric transforms hit image and masks identically; noise and
    contrast touch only the image and are clipped back to [0, 1]."""
    image = sample.image
    masks = [sample.region_mask, sample.edge_mask, sample.instance_map]
    if params.hflip:
        image = image[:, :, ::-1]
        masks = [m[:, ::-1] for m in masks]
    if params.vflip:
        image = image[:, ::-1, :]
        masks = [m[::-1, :] for m in masks]
    if params.rot_quarters % 4:
        k = params.rot_quarters % 4
        image = np.rot90(image, k, axes=(1, 2))
        masks = [np.rot90(m, k, axes=(0, 1)) for m in masks]
    image = np.ascontiguousarray(image, dtype=np.float32)
    if params.noise_std > 0:
        rng = np.random.default_rng(params.noise_seed)
        image = image + rng.normal(0, params.noise_std, size=image.shape).astype(np.float32)
    if params.contrast != 1.0:
        mean = image.mean()
        image = mean + params.contrast * (image - mean)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    region, edge, instances = (np.ascontiguousarray(m) for m in masks)
    return Sample(image, region, edge, instances, sample.true_count)


def augment(sample: Sample, seed) -> Sample:
    """Random flip / quarter rotation / noise / contrast, seed-deterministic."""
    return apply_augment(sample, draw_augment_params(seed))


# -- dataset I/O -----------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
_SUBDIRS = ("images", "region", "edge", "instance")


def write_dataset(samples: list[Sample], out_dir, cfg: SyntheticSceneConfig | None = None,
                  seed: int | None = None):
    """Write samples to ``out_dir`` as PNGs plus a manifest.

    Layout: images/NNNN.png (8-bit RGB), region/NNNN.png and edge/NNNN.png
    (8-bit gray, 0 or 255), instance/NNNN.png (16-bit gray), manifest.json.
    """
    out_dir = Path(out_dir)
    if not samples:
        raise DatasetError("write_dataset: refusing to write an empty dataset")
    for sub in _SUBDIRS:
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        name = f"{i:04d}.png"
        rgb = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb, mode="RGB").save(out_dir / "images" / name)
        Image.fromarray(s.region_mask * np.uint8(255), mode="L").save(out_dir / "region" / name)
        Image.fromarray(s.edge_mask * np.uint8(255), mode="L").save(out_dir / "edge" / name)
        if s.instance_map.max() > np.iinfo(np.uint16).max:
            raise DatasetError("write_dataset: instance labels exceed 16-bit range")
        Image.fromarray(s.instance_map.astype(np.uint16)).save(out_dir / "instance" / name)
    h, w = samples[0].region_mask.shape
    manifest = {
        "format": "owps-dataset",
        "version": 1,
        "size": [h, w],
        "count": len(samples),
        "seed": seed,
        "config": asdict(cfg) if cfg is not None else None,
    }
    tmp = out_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    tmp.replace(out_dir / MANIFEST_NAME)


def read_dataset(in_dir) -> list[Sample]:
    """Load a dataset directory written by ``write_dataset``."""
    in_dir = Path(in_dir)
    manifest_path = in_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"read_dataset: missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    n = int(manifest["count"])
    on_disk = sorted(p.name for p in (in_dir / "images").glob("*.png"))
    if len(on_disk) != n:
        raise DatasetError(f"read_dataset: manifest says {n} samples, "
                           f"found {len(on_disk)} image files")
    samples = []
    for i in range(n):
        name = f"{i:04d}.png"
        try:
            rgb = np.asarray(Image.open(in_dir / "images" / name), dtype=np.float32)
            region = np.asarray(Image.open(in_dir / "region" / name))
            edge = np.asarray(Image.open(in_dir / "edge" / name))
            instances = np.asarray(Image.open(in_dir / "instance" / name))
        except FileNotFoundError as exc:
            raise DatasetError(f"read_dataset: missing file for sample {i}: {exc}") from exc
        image = (rgb / 255.0).transpose(2, 0, 1).astype(np.float32)
        instances = instances.astype(np.int32)
        labels = np.unique(instances)
        samples.append(Sample(
            image=np.ascontiguousarray(image),
            region_mask=(region > 127).astype(np.uint8),
            edge_mask=(edge > 127).astype(np.uint8),
            instance_map=instances,
            true_count=int((labels > 0).sum()),
        ))
    return samples
