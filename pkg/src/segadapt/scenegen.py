"""Procedural desk-scene generator for the two toy domains.

Frames contain colored rectangles, discs and triangles on a flat background;
later shapes occlude earlier ones. A class id fixes a base hue; instances of
a class get small color jitter. Domains differ only in appearance (hue
rotation, brightness gradient, speckle, sensor noise), never in geometry:
geometry and appearance are drawn from separate RNG streams of the frame
seed, so the same seed yields pixel-identical label and instance maps in
every domain.

A dataset directory holds one PPM image, one labels PGM, one instances PGM
per frame, plus a manifest.json naming them and the mask files a segmenter
stage is expected to add later.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .autodiff import Tensor
from .errors import DataError

__all__ = [
    "DomainParams",
    "SYN_DOMAIN",
    "REAL_DOMAIN",
    "ShapeSpec",
    "Frame",
    "FrameFiles",
    "DatasetManifest",
    "sample_shapes",
    "rasterize_shape",
    "paint_shapes",
    "compose_frame",
    "render_frame",
    "gen_dataset",
    "load_manifest",
    "domain_by_name",
]

MIN_SHAPES = 1
MAX_SHAPES = 6

# Class hues form an evenly spaced ladder over part of the wheel. Spacing is
# chosen so the real domain's hue rotation parks each object just short of
# the midline between neighbouring classes. The additive brightness gradient
# then clips the bright side of an object (hue distorts where a channel
# saturates), so patches of the object drift across the class boundary while
# the object mean, held steady by the small per-instance jitter, stays on the
# correct side. Errors on the shifted domain are therefore smooth patches
# inside objects rather than whole-object identity flips.
_HUE_SPAN = 0.6
_SATURATION = 0.65
_VALUE = 0.85
_COLOR_JITTER = 0.03
# Flat-colored objects give the variance hinge nothing to work with: two
# segments of one object, or two instances of one class, have identical
# appearance, so the margin between their pooled means can only come from
# features that leak segmentation-relevant information, and the hinge then
# grinds against the invariance term for the rest of the run. Every instance
# therefore carries its own gentle chromatic shading (a linear color ramp
# across the shape in a random direction), which hands the hinge an honest,
# class-irrelevant cue for separating sub-segments and same-class neighbors.
_SHAPE_SHADE = 0.05
# In the annotated domain each silhouette renders a random sub-pixel offset
# away from the label grid, like rasterization slop between a renderer and
# its annotation export. Edge pixels are then irreducibly ambiguous, so the
# supervised loss keeps a permanent floor and its gradients never vanish;
# that keeps the alternating supervised and self-supervised steps on a
# stable footing for the whole run instead of letting the regularizer
# dominate once the easy pixels are learned. The unannotated domain renders
# aligned: its segment masks are grown from scene geometry, and offsetting
# the appearance would poison every mask with wrong-side boundary slivers
# that the pooling losses would then smear across object borders.
_RENDER_OFFSET = 0.35


def _u64(seed: int) -> int:
    return int(seed) & 0xFFFF_FFFF_FFFF_FFFF


@dataclass(frozen=True)
class DomainParams:
    """Appearance knobs of one domain; geometry is domain-independent."""

    hue_rotation_degrees: float = 0.0
    brightness_gradient_amplitude: float = 0.0
    texture_speckle_probability: float = 0.0
    noise_sigma: float = 0.0
    render_offset: float = 0.0
    background_color: tuple[float, float, float] = (0.2, 0.2, 0.2)


SYN_DOMAIN = DomainParams(
    hue_rotation_degrees=0.0,
    brightness_gradient_amplitude=0.0,
    texture_speckle_probability=0.0,
    noise_sigma=0.01,
    render_offset=_RENDER_OFFSET,
)

REAL_DOMAIN = DomainParams(
    hue_rotation_degrees=25.0,
    brightness_gradient_amplitude=0.25,
    texture_speckle_probability=0.02,
    noise_sigma=0.05,
)


def domain_by_name(name: str) -> DomainParams:
    try:
        return {"syn": SYN_DOMAIN, "real": REAL_DOMAIN}[name]
    except KeyError:
        raise ValueError(f"unknown domain {name!r}, expected 'syn' or 'real'") from None


@dataclass(frozen=True)
class ShapeSpec:
    kind: str  # rectangle | disc | triangle
    class_id: int
    geometry: tuple


@dataclass
class Frame:
    image: Tensor  # (3, H, W), values in [0, 1]
    labels: np.ndarray  # (H, W) int32, 0 is background
    instances: np.ndarray  # (H, W) int32, 0 is background


def class_base_color(class_id: int, class_count: int) -> np.ndarray:
    hue = _HUE_SPAN * (class_id - 1) / max(1, class_count - 1)
    return np.array(colorsys.hsv_to_rgb(hue, _SATURATION, _VALUE))


def sample_shapes(
    num_shapes: int, class_count: int, h: int, w: int, rng: np.random.Generator
) -> list[ShapeSpec]:
    side = min(h, w)
    shapes = []
    for _ in range(num_shapes):
        class_id = int(rng.integers(1, class_count))
        kind = ("rectangle", "disc", "triangle")[int(rng.integers(0, 3))]
        if kind == "rectangle":
            rw = int(rng.integers(max(4, side // 6), max(5, (3 * side) // 7) + 1))
            rh = int(rng.integers(max(4, side // 6), max(5, (3 * side) // 7) + 1))
            x0 = int(rng.integers(0, w - rw + 1))
            y0 = int(rng.integers(0, h - rh + 1))
            geometry = (x0, y0, rw, rh)
        elif kind == "disc":
            r = rng.uniform(0.09 * side, 0.21 * side)
            cx = rng.uniform(r, w - 1 - r)
            cy = rng.uniform(r, h - 1 - r)
            geometry = (cx, cy, r)
        else:
            cx = rng.uniform(0.15, 0.85) * w
            cy = rng.uniform(0.15, 0.85) * h
            base = rng.uniform(0.0, 2.0 * np.pi)
            pts = []
            for i in range(3):
                ang = base + i * 2.0 * np.pi / 3.0 + rng.uniform(-0.5, 0.5)
                rad = rng.uniform(0.12 * side, 0.25 * side)
                pts.append((cx + rad * np.cos(ang), cy + rad * np.sin(ang)))
            geometry = tuple(pts)
        shapes.append(ShapeSpec(kind=kind, class_id=class_id, geometry=geometry))
    return shapes


def rasterize_shape(spec: ShapeSpec, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    if spec.kind == "rectangle":
        x0, y0, rw, rh = spec.geometry
        mask[max(0, y0) : y0 + rh, max(0, x0) : x0 + rw] = True
    elif spec.kind == "disc":
        cx, cy, r = spec.geometry
        yy, xx = np.ogrid[0:h, 0:w]
        mask = ((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r
    elif spec.kind == "triangle":
        (x1, y1), (x2, y2), (x3, y3) = spec.geometry
        yy, xx = np.mgrid[0:h, 0:w]
        xx = xx + 0.5
        yy = yy + 0.5
        d1 = (xx - x2) * (y1 - y2) - (x1 - x2) * (yy - y2)
        d2 = (xx - x3) * (y2 - y3) - (x2 - x3) * (yy - y3)
        d3 = (xx - x1) * (y3 - y1) - (x3 - x1) * (yy - y1)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        mask = ~(neg & pos)
    else:
        raise ValueError(f"unknown shape kind {spec.kind!r}")
    return mask


def paint_shapes(shapes: list[ShapeSpec], h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Ground truth maps; instance ids follow paint order, occlusion wins."""
    labels = np.zeros((h, w), dtype=np.int32)
    instances = np.zeros((h, w), dtype=np.int32)
    for idx, spec in enumerate(shapes, start=1):
        m = rasterize_shape(spec, h, w)
        labels[m] = spec.class_id
        instances[m] = idx
    return labels, instances


_AA_SUBSAMPLES = 4  # 4x4 subpixel grid for soft shape edges


def shape_coverage(
    spec: ShapeSpec, h: int, w: int, offset: tuple[float, float] = (0.0, 0.0)
) -> np.ndarray:
    """Fraction of each pixel the shape covers, shifted by ``offset`` (x, y).

    Soft coverage gives shape edges a band of fractional pixels. Rendering
    blends that band with whatever lies underneath, so edge pixels carry
    mixed colors while the hard ground truth keeps a single label. Combined
    with the sub-pixel render offset, those pixels are genuinely ambiguous,
    which leaves the supervised loss a permanent noise floor instead of
    letting it collapse to zero.
    """
    ox, oy = offset
    if spec.kind == "rectangle":
        # Pixel j belongs to the hard mask iff x0 <= j <= x0 + rw - 1, so the
        # silhouette is the box [x0 - 0.5, x0 + rw - 0.5]; coverage is the
        # overlap of each unit pixel cell with the shifted box, separably.
        x0, y0, rw, rh = spec.geometry
        px = np.arange(w)
        py = np.arange(h)
        cx = np.clip(
            np.minimum(px + 0.5, x0 + rw - 0.5 + ox) - np.maximum(px - 0.5, x0 - 0.5 + ox),
            0.0,
            1.0,
        )
        cy = np.clip(
            np.minimum(py + 0.5, y0 + rh - 0.5 + oy) - np.maximum(py - 0.5, y0 - 0.5 + oy),
            0.0,
            1.0,
        )
        return cy[:, None] * cx[None, :]
    offs = (np.arange(_AA_SUBSAMPLES) + 0.5) / _AA_SUBSAMPLES - 0.5
    cov = np.zeros((h, w))
    yy, xx = np.ogrid[0:h, 0:w]
    if spec.kind == "disc":
        cx, cy, r = spec.geometry
        cx, cy = cx + ox, cy + oy
        for dy in offs:
            for dx in offs:
                cov += (xx + dx - cx) ** 2 + (yy + dy - cy) ** 2 <= r * r
    elif spec.kind == "triangle":
        (x1, y1), (x2, y2), (x3, y3) = spec.geometry
        x1, x2, x3 = x1 + ox, x2 + ox, x3 + ox
        y1, y2, y3 = y1 + oy, y2 + oy, y3 + oy
        for dy in offs:
            for dx in offs:
                px = xx + 0.5 + dx
                py = yy + 0.5 + dy
                d1 = (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)
                d2 = (px - x3) * (y2 - y3) - (x2 - x3) * (py - y3)
                d3 = (px - x1) * (y3 - y1) - (x3 - x1) * (py - y1)
                neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
                pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
                cov += ~(neg & pos)
    else:
        raise ValueError(f"unknown shape kind {spec.kind!r}")
    return cov / (_AA_SUBSAMPLES * _AA_SUBSAMPLES)


def _chroma_direction(rng: np.random.Generator) -> np.ndarray:
    """Unit RGB direction with zero luminance component."""
    v = rng.normal(size=3)
    v -= v.mean()
    n = float(np.linalg.norm(v))
    if n < 1e-9:
        return np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
    return v / n


def _shade_map(cov: np.ndarray, angle: float) -> np.ndarray:
    """Linear ramp across the covered pixels, spanning [-1, 1] at the rim."""
    ys, xs = np.nonzero(cov > 0.0)
    cx, cy = xs.mean(), ys.mean()
    c, s = np.cos(angle), np.sin(angle)
    span = np.abs((xs - cx) * c + (ys - cy) * s).max()
    h, w = cov.shape
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx - cx) * c + (yy - cy) * s) / max(float(span), 1.0)


def _rotate_hue(img: np.ndarray, degrees: float) -> np.ndarray:
    # Rotation about the gray axis in RGB space.
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    t = (1.0 - c) / 3.0
    u = s / np.sqrt(3.0)
    m = np.array(
        [
            [c + t, t - u, t + u],
            [t + u, c + t, t - u],
            [t - u, t + u, c + t],
        ]
    )
    return np.einsum("ij,jhw->ihw", m, img)


def apply_domain(img: np.ndarray, domain: DomainParams, rng: np.random.Generator) -> np.ndarray:
    """Hue rotation, brightness gradient, speckle, noise, clamp, in order.

    All random fields are drawn unconditionally so the appearance stream
    advances identically for every domain.
    """
    h, w = img.shape[1:]
    img = _rotate_hue(img, domain.hue_rotation_degrees)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    proj = xx * np.cos(phi) + yy * np.sin(phi)
    lo, hi = proj.min(), proj.max()
    ramp = (proj - lo) / (hi - lo) - 0.5 if hi > lo else np.zeros((h, w))
    img = img + domain.brightness_gradient_amplitude * ramp
    speckle = rng.random((h, w)) < domain.texture_speckle_probability
    speckle_color = rng.random((3, h, w))
    img = np.where(speckle, speckle_color, img)
    img = img + rng.normal(0.0, domain.noise_sigma, (3, h, w))
    return np.clip(img, 0.0, 1.0)


def compose_frame(
    shapes: list[ShapeSpec], class_count: int, domain: DomainParams, h: int, w: int, seed: int
) -> Frame:
    """Renders explicit shapes; appearance randomness comes from stream 1."""
    labels, instances = paint_shapes(shapes, h, w)
    rng = np.random.default_rng(np.random.SeedSequence([_u64(seed), 1]))
    img = np.empty((3, h, w))
    img[:] = np.array(domain.background_color)[:, None, None]
    for idx, spec in enumerate(shapes, start=1):
        jitter = rng.uniform(-_COLOR_JITTER, _COLOR_JITTER, size=3)
        off = rng.uniform(-domain.render_offset, domain.render_offset, size=2)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        chroma = _chroma_direction(rng)
        cov = shape_coverage(spec, h, w, offset=(off[0], off[1]))
        if cov.any():
            color = np.clip(class_base_color(spec.class_id, class_count) + jitter, 0.0, 1.0)
            tex = color[:, None, None] + _SHAPE_SHADE * _shade_map(cov, angle)[None] * chroma[:, None, None]
            img = cov * np.clip(tex, 0.0, 1.0) + (1.0 - cov) * img
    img = apply_domain(img, domain, rng)
    return Frame(image=Tensor(img), labels=labels, instances=instances)


def render_frame(
    num_shapes: int, class_count: int, domain: DomainParams, h: int, w: int, seed: int
) -> Frame:
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    if h < 16 or w < 16:
        raise ValueError(f"frame must be at least 16x16, got {h}x{w}")
    if not MIN_SHAPES <= num_shapes <= MAX_SHAPES:
        raise ValueError(f"num_shapes must be in [{MIN_SHAPES}, {MAX_SHAPES}], got {num_shapes}")
    geometry_rng = np.random.default_rng(np.random.SeedSequence([_u64(seed), 0]))
    shapes = sample_shapes(num_shapes, class_count, h, w, geometry_rng)
    return compose_frame(shapes, class_count, domain, h, w, seed)


# ---------------------------------------------------------------------------
# dataset directories


@dataclass(frozen=True)
class FrameFiles:
    image: str
    labels: str
    instances: str
    masks: str


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    domain: str
    frame_count: int
    seed: int
    class_count: int
    height: int
    width: int
    frames: tuple[FrameFiles, ...]


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def gen_dataset(
    frame_count: int,
    domain_name: str,
    out_dir,
    seed: int,
    class_count: int = 5,
    height: int = 64,
    width: int = 64,
) -> DatasetManifest:
    """Writes ``frame_count`` frames; frame k is seeded with seed XOR k."""
    domain = domain_by_name(domain_name)
    if frame_count < 1:
        raise ValueError(f"frame_count must be >= 1, got {frame_count}")
    if class_count > 255:
        raise ValueError("class ids must fit 8-bit label images")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k in range(frame_count):
        frame_seed = _u64(seed) ^ k
        count_rng = np.random.default_rng(np.random.SeedSequence([frame_seed, 2]))
        num_shapes = int(count_rng.integers(MIN_SHAPES, MAX_SHAPES + 1))
        frame = render_frame(num_shapes, class_count, domain, height, width, frame_seed)
        files = FrameFiles(
            image=f"{k:05d}.ppm",
            labels=f"{k:05d}.labels.pgm",
            instances=f"{k:05d}.instances.pgm",
            masks=f"{k:05d}.masks.json",
        )
        netpbm.write_ppm(out / files.image, _quantize(frame.image.data).transpose(1, 2, 0))
        netpbm.write_pgm(out / files.labels, frame.labels.astype(np.uint8))
        netpbm.write_pgm(out / files.instances, frame.instances.astype(np.uint8))
        entries.append(files)
    manifest = {
        "domain": domain_name,
        "frame_count": frame_count,
        "seed": int(seed),
        "class_count": class_count,
        "height": height,
        "width": width,
        "frames": [
            {"image": f.image, "labels": f.labels, "instances": f.instances, "masks": f.masks}
            for f in entries
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return DatasetManifest(
        root=out,
        domain=domain_name,
        frame_count=frame_count,
        seed=int(seed),
        class_count=class_count,
        height=height,
        width=width,
        frames=tuple(entries),
    )


def load_manifest(root) -> DatasetManifest:
    """Parses manifest.json and checks the listed frame files exist.

    Mask files are exempt from the existence check: the manifest names them
    before a segmenter stage has produced them.
    """
    root = Path(root)
    path = root / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest {path}: {e}") from None
    try:
        frames = tuple(
            FrameFiles(
                image=f["image"], labels=f["labels"], instances=f["instances"], masks=f["masks"]
            )
            for f in doc["frames"]
        )
        manifest = DatasetManifest(
            root=root,
            domain=doc["domain"],
            frame_count=int(doc["frame_count"]),
            seed=int(doc["seed"]),
            class_count=int(doc["class_count"]),
            height=int(doc["height"]),
            width=int(doc["width"]),
            frames=frames,
        )
    except (KeyError, TypeError) as e:
        raise DataError(f"malformed manifest {path}: {e}") from None
    if manifest.frame_count != len(frames):
        raise DataError(f"{path}: frame_count {manifest.frame_count} != {len(frames)} entries")
    for f in frames:
        for name in (f.image, f.labels, f.instances):
            if not (root / name).exists():
                raise DataError(f"manifest {path} lists missing file {name}")
    return manifest
