"""Run-length encoded segment masks and the oversegmentation oracle.

Masks are binary regions over an (H, W) grid stored as (start, length) runs
of row-major pixel indices. A frame's masks live in a ``MaskSet`` whose JSON
serialization is canonical: masks sorted by (first run start, pixel count),
runs sorted by start, so re-encoding a set never changes its bytes.

The oracle fakes the output of a promptable segmenter on rendered frames: it
derives overlapping masks from ground-truth instance ids by probabilistically
keeping whole instances, splitting them into parts, jittering boundaries and
sprinkling spurious background blobs. Real segmenter prompt geometry is not
modeled; statistics (overlap, duplication, noise) are what matters here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, EmptyMaskError, ShapeError

__all__ = [
    "SegmentMask",
    "MaskSet",
    "MaskStats",
    "OracleParams",
    "encode_rle",
    "decode_rle",
    "oversegment_oracle",
    "mask_stats",
    "save_mask_set",
    "load_mask_set",
]


def _u64(seed: int) -> int:
    return int(seed) & 0xFFFF_FFFF_FFFF_FFFF


@dataclass(frozen=True)
class SegmentMask:
    """One binary region as sorted, maximal, non-overlapping runs."""

    width: int
    height: int
    runs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ShapeError(f"bad mask grid {self.width}x{self.height}")
        if not self.runs:
            raise EmptyMaskError("mask has no pixels")
        limit = self.width * self.height
        prev_end = -2
        for start, length in self.runs:
            if length < 1:
                raise DataError(f"run length must be positive, got {length}")
            if start < 0 or start + length > limit:
                raise DataError(f"run ({start}, {length}) leaves the {limit}-pixel grid")
            if start <= prev_end:
                raise DataError("runs must be sorted, non-overlapping and maximal")
            prev_end = start + length  # == start of a touching run, so <= catches merges
        # maximality: a run must not end where the next begins
        # (prev_end tracks one past the last pixel; equality above rejects it)

    @property
    def pixel_count(self) -> int:
        return sum(length for _, length in self.runs)

    def flat_indices(self) -> np.ndarray:
        """Row-major pixel indices, ascending."""
        parts = [np.arange(s, s + l, dtype=np.int64) for s, l in self.runs]
        return parts[0] if len(parts) == 1 else np.concatenate(parts)


def encode_rle(bitmap: np.ndarray) -> SegmentMask:
    """Encodes a boolean (H, W) bitmap; all-false bitmaps are an error."""
    bm = np.asarray(bitmap)
    if bm.ndim != 2:
        raise ShapeError(f"bitmap must be (H, W), got {bm.shape}")
    h, w = bm.shape
    idx = np.flatnonzero(bm.ravel())
    if idx.size == 0:
        raise EmptyMaskError("cannot encode an all-false bitmap")
    breaks = np.flatnonzero(np.diff(idx) > 1) + 1
    starts = idx[np.concatenate(([0], breaks))]
    ends = idx[np.concatenate((breaks - 1, [idx.size - 1]))]
    runs = tuple((int(s), int(e - s + 1)) for s, e in zip(starts, ends))
    return SegmentMask(width=w, height=h, runs=runs)


def decode_rle(mask: SegmentMask) -> np.ndarray:
    flat = np.zeros(mask.width * mask.height, dtype=bool)
    flat[mask.flat_indices()] = True
    return flat.reshape(mask.height, mask.width)


@dataclass(frozen=True)
class MaskSet:
    """All masks of one frame; masks may overlap or duplicate freely."""

    width: int
    height: int
    masks: tuple[SegmentMask, ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ShapeError(f"bad mask grid {self.width}x{self.height}")
        for m in self.masks:
            if (m.width, m.height) != (self.width, self.height):
                raise DataError(
                    f"mask grid {m.width}x{m.height} does not match set {self.width}x{self.height}"
                )

    def canonical(self) -> "MaskSet":
        # Runs tuple as final tie-breaker gives a total order, so equal-stat
        # masks still serialize in one fixed sequence.
        ordered = sorted(self.masks, key=lambda m: (m.runs[0][0], m.pixel_count, m.runs))
        return MaskSet(self.width, self.height, tuple(ordered))

    def to_json_bytes(self) -> bytes:
        doc = {
            "width": self.width,
            "height": self.height,
            "masks": [{"runs": [v for run in m.runs for v in run]} for m in self.masks],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode() + b"\n"


def save_mask_set(mask_set: MaskSet, path) -> None:
    Path(path).write_bytes(mask_set.canonical().to_json_bytes())


def load_mask_set(path) -> MaskSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"mask file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"malformed mask file {path}: {e}") from None
    try:
        width, height = int(doc["width"]), int(doc["height"])
        masks = []
        for entry in doc["masks"]:
            flat = entry["runs"]
            if len(flat) % 2 != 0:
                raise DataError(f"odd run list in {path}")
            runs = tuple((int(flat[i]), int(flat[i + 1])) for i in range(0, len(flat), 2))
            masks.append(SegmentMask(width=width, height=height, runs=runs))
        return MaskSet(width=width, height=height, masks=tuple(masks))
    except (KeyError, TypeError) as e:
        raise DataError(f"malformed mask file {path}: {e}") from None


# ---------------------------------------------------------------------------
# oversegmentation oracle


@dataclass(frozen=True)
class OracleParams:
    split_probability: float = 0.7
    max_parts_per_instance: int = 3
    keep_whole_probability: float = 0.8
    boundary_jitter_radius: int = 1
    spurious_background_masks: int = 2
    min_mask_pixels: int = 8

    def __post_init__(self):
        if not 0.0 <= self.split_probability <= 1.0:
            raise ValueError(f"split_probability out of [0,1]: {self.split_probability}")
        if not 0.0 <= self.keep_whole_probability <= 1.0:
            raise ValueError(f"keep_whole_probability out of [0,1]: {self.keep_whole_probability}")
        if self.max_parts_per_instance < 1:
            raise ValueError("max_parts_per_instance must be >= 1")
        if self.boundary_jitter_radius < 0:
            raise ValueError("boundary_jitter_radius must be >= 0")
        if self.spurious_background_masks < 0:
            raise ValueError("spurious_background_masks must be >= 0")
        if self.min_mask_pixels < 1:
            raise ValueError("min_mask_pixels must be >= 1")


def _disc(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= radius * radius


def _jitter(mask: np.ndarray, radius: int, rng: np.random.Generator) -> np.ndarray:
    """Randomly toggles pixels within ``radius`` of the mask boundary."""
    if radius <= 0 or not mask.any():
        return mask
    selem = _disc(radius)
    grown = ndimage.binary_dilation(mask, structure=selem)
    shrunk = ndimage.binary_erosion(mask, structure=selem)
    band_out = grown & ~mask
    band_in = mask & ~shrunk
    flips_out = band_out & (rng.random(mask.shape) < 0.5)
    flips_in = band_in & (rng.random(mask.shape) < 0.5)
    return (mask | flips_out) & ~flips_in


def oversegment_oracle(instances: np.ndarray, params: OracleParams, seed: int) -> MaskSet:
    """Derives plausible overlapping segment masks from an instance id map.

    Per instance (ids >= 1, ascending): with keep-whole probability emit the
    instance as one mask; independently, with split probability partition it
    into 2..max-parts parts around random seed pixels (nearest-seed
    assignment) and emit each part. Every emitted mask gets its boundary
    jittered, then masks below min-mask-pixels are dropped. Finally up to
    ``spurious_background_masks`` small blobs are drawn from the background.
    Output is canonical, so one (instances, params, seed) triple maps to one
    byte sequence.
    """
    inst = np.asarray(instances)
    if inst.ndim != 2:
        raise ShapeError(f"instance map must be (H, W), got {inst.shape}")
    h, w = inst.shape
    rng = np.random.default_rng(np.random.SeedSequence([_u64(seed), 3]))

    emitted: list[np.ndarray] = []
    for iid in [int(v) for v in np.unique(inst) if v >= 1]:
        region = inst == iid
        npx = int(region.sum())
        keep = rng.random() < params.keep_whole_probability
        split = rng.random() < params.split_probability
        if keep:
            emitted.append(region)
        if split and params.max_parts_per_instance >= 2 and npx >= 2:
            k = min(int(rng.integers(2, params.max_parts_per_instance + 1)), npx)
            flat = np.flatnonzero(region.ravel())
            seeds = rng.choice(flat, size=k, replace=False)
            py, px = np.divmod(flat, w)
            sy, sx = np.divmod(seeds, w)
            d2 = (py[:, None] - sy[None, :]) ** 2 + (px[:, None] - sx[None, :]) ** 2
            assign = d2.argmin(axis=1)
            for part in range(k):
                bm = np.zeros(h * w, dtype=bool)
                bm[flat[assign == part]] = True
                emitted.append(bm.reshape(h, w))

    kept: list[np.ndarray] = []
    for bm in emitted:
        bm = _jitter(bm, params.boundary_jitter_radius, rng)
        if int(bm.sum()) >= params.min_mask_pixels:
            kept.append(bm)

    background = inst == 0
    bg_flat = np.flatnonzero(background.ravel())
    for _ in range(params.spurious_background_masks):
        if bg_flat.size == 0:
            break
        center = int(rng.choice(bg_flat))
        radius = rng.uniform(2.0, 6.0)
        cy, cx = divmod(center, w)
        yy, xx = np.ogrid[0:h, 0:w]
        blob = (((yy - cy) ** 2 + (xx - cx) ** 2) <= radius * radius) & background
        blob = _jitter(blob, params.boundary_jitter_radius, rng)
        if int(blob.sum()) >= params.min_mask_pixels:
            kept.append(blob)

    return MaskSet(width=w, height=h, masks=tuple(encode_rle(bm) for bm in kept)).canonical()


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class MaskStats:
    mask_count: int
    pixel_counts: tuple[int, ...]
    overlap_pixels: int
    coverage: float


def mask_stats(mask_set: MaskSet) -> MaskStats:
    """Per-set summary: sizes, pixels claimed by >1 mask, covered fraction."""
    total = mask_set.width * mask_set.height
    claims = np.zeros(total, dtype=np.int64)
    counts = []
    for m in mask_set.masks:
        idx = m.flat_indices()
        claims[idx] += 1
        counts.append(int(idx.size))
    return MaskStats(
        mask_count=len(mask_set.masks),
        pixel_counts=tuple(counts),
        overlap_pixels=int((claims >= 2).sum()),
        coverage=float((claims >= 1).sum() / total),
    )
