"""Temporal luma enhancement and the pixel ops it rides on.

Each frame's luma channel is pulled toward the mean luma of its temporal
neighbors at the same site, which suppresses frame-to-frame exposure flicker
without touching chroma. Conversions use full-range BT.601 YCrCb; geometry
is a bottom-anchored square crop followed by bilinear resize.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import timedelta
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from streamgate.catalog import (
    Catalog,
    CatalogError,
    Image,
    ImageRecord,
    load_image,
    save_png,
)


class EnhanceError(CatalogError):
    """Bad enhancement parameters or inputs."""


def _quantize(x: np.ndarray) -> np.ndarray:
    """Round half away from zero is not needed here; inputs are >= -0.5, so
    floor(x + 0.5) is plain round-half-up. Clamp to the 8-bit range."""
    return np.clip(np.floor(x + 0.5), 0.0, 255.0).astype(np.uint8)


def rgb_to_ycrcb(img: Image) -> Image:
    """Full-range BT.601 RGB -> YCrCb, quantized to uint8.

    Y  = 0.299 R + 0.587 G + 0.114 B
    Cr = (R - Y) * 0.713 + 128
    Cb = (B - Y) * 0.564 + 128
    """
    if img.colorspace != "RGB" or img.channels != 3:
        raise EnhanceError("rgb_to_ycrcb expects a 3-channel RGB frame")
    px = img.pixels.astype(np.float64)
    r, g, b = px[:, :, 0], px[:, :, 1], px[:, :, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cr = (r - y) * 0.713 + 128.0
    cb = (b - y) * 0.564 + 128.0
    return Image(np.stack([_quantize(y), _quantize(cr), _quantize(cb)], axis=2), "YCrCb")


def ycrcb_to_rgb(img: Image) -> Image:
    """Algebraic inverse of rgb_to_ycrcb on the quantized planes.

    Round-trip error is at most 1 per channel: the worst-case quantization
    error through Y/Cr/Cb stays below 1.5 before the final rounding.
    """
    if img.colorspace != "YCrCb" or img.channels != 3:
        raise EnhanceError("ycrcb_to_rgb expects a 3-channel YCrCb frame")
    px = img.pixels.astype(np.float64)
    y, cr, cb = px[:, :, 0], px[:, :, 1], px[:, :, 2]
    r = y + (cr - 128.0) / 0.713
    b = y + (cb - 128.0) / 0.564
    g = (y - 0.299 * r - 0.114 * b) / 0.587
    return Image(np.stack([_quantize(r), _quantize(g), _quantize(b)], axis=2), "RGB")


def resize(img: Image, height: int, width: int) -> Image:
    """Bilinear resize with half-pixel-aligned sample centers.

    Matching dimensions return the input untouched, so a no-op resize is
    bit-identical.
    """
    if height < 1 or width < 1:
        raise EnhanceError(f"target size must be positive, got {height}x{width}")
    if img.height == height and img.width == width:
        return img
    src = img.pixels.astype(np.float64)
    sy = _sample_axis(img.height, height)
    sx = _sample_axis(img.width, width)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    fy = (sy - y0)[:, np.newaxis, np.newaxis]
    fx = (sx - x0)[np.newaxis, :, np.newaxis]
    top = src[y0][:, x0] * (1.0 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1.0 - fx) + src[y1][:, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return Image(_quantize(out), img.colorspace)


def _sample_axis(src_size: int, dst_size: int) -> np.ndarray:
    scale = src_size / dst_size
    coords = (np.arange(dst_size, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(coords, 0.0, src_size - 1.0)


def bottom_center_crop(img: Image) -> Image:
    """Largest square crop anchored to the bottom edge, horizontally centered.

    Water sits low in a fixed river camera's frame, so the bottom anchor
    keeps it when trimming a landscape frame to a square.
    """
    side = min(img.height, img.width)
    y0 = img.height - side
    x0 = (img.width - side) // 2
    return Image(img.pixels[y0 : y0 + side, x0 : x0 + side].copy(), img.colorspace)


def enhance_luma(y: np.ndarray, mu: np.ndarray, beta: float) -> np.ndarray:
    """Mix a luma plane toward a reference plane: Y' = Y + beta * (Y - mu).

    Computed as (1 + beta) * Y - beta * mu so that beta = 0 returns Y
    bit-identically and beta = -1 returns mu exactly (then rounded).
    beta must lie in [-1, 0]: 0 is a no-op, -1 replaces the plane with mu.
    """
    if not -1.0 <= beta <= 0.0:
        raise EnhanceError(f"beta must be in [-1, 0], got {beta}")
    if y.shape != np.shape(mu) and np.ndim(mu) != 0:
        raise EnhanceError(f"luma/reference shape mismatch: {y.shape} vs {np.shape(mu)}")
    if beta == 0.0:
        return y.copy()
    mixed = (1.0 + beta) * y.astype(np.float64) - beta * np.asarray(mu, dtype=np.float64)
    return _quantize(mixed)


def window_mean_luma(planes: list[np.ndarray]) -> np.ndarray:
    """Pixelwise mean (float64) of same-shaped quantized luma planes."""
    if not planes:
        raise EnhanceError("window is empty")
    shape = planes[0].shape
    for p in planes:
        if p.shape != shape:
            raise EnhanceError("window planes differ in shape")
    acc = np.zeros(shape, dtype=np.float64)
    for p in planes:
        acc += p
    return acc / len(planes)


@dataclass
class EnhanceParams:
    """Knobs for the enhancement stage.

    alpha: window size; up to alpha/2 usable frames are taken on each side
    of the target frame (even, >= 2).
    beta: luma mix weight in [-1, 0].
    lookaround_hours: neighbors further than this from the target are
    ignored, so overnight gaps do not leak across days.
    crop_target: output side length after crop + resize.
    """

    alpha: int = 4
    beta: float = -0.5
    lookaround_hours: float = 12.0
    crop_target: int = 256

    def __post_init__(self):
        if self.alpha < 2 or self.alpha % 2 != 0:
            raise EnhanceError(f"alpha must be a positive even integer, got {self.alpha}")
        if not -1.0 <= self.beta <= 0.0:
            raise EnhanceError(f"beta must be in [-1, 0], got {self.beta}")
        if self.lookaround_hours <= 0:
            raise EnhanceError("lookaround_hours must be positive")
        if self.crop_target < 8:
            raise EnhanceError("crop_target must be at least 8")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "lookaround_hours": self.lookaround_hours,
            "crop_target": self.crop_target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnhanceParams":
        return cls(**d)


def temporal_window(
    site_records: list[ImageRecord],
    index: int,
    alpha: int,
    lookaround_hours: float,
) -> list[ImageRecord]:
    """Neighbor records for the frame at site_records[index].

    Up to alpha/2 nearest usable predecessors and alpha/2 nearest usable
    successors at the same site, within lookaround_hours of the target.
    The target itself is excluded; records failing the quality gate are
    skipped. site_records must be in catalog (time) order.
    """
    target = site_records[index]
    horizon = timedelta(hours=lookaround_hours)
    half = alpha // 2
    before: list[ImageRecord] = []
    for rec in reversed(site_records[:index]):
        if len(before) == half:
            break
        if target.captured_at - rec.captured_at > horizon:
            break
        if rec.quality.passes():
            before.append(rec)
    after: list[ImageRecord] = []
    for rec in site_records[index + 1 :]:
        if len(after) == half:
            break
        if rec.captured_at - target.captured_at > horizon:
            break
        if rec.quality.passes():
            after.append(rec)
    return list(reversed(before)) + after


@dataclass
class EnhanceIssue:
    record_id: str
    reason: str


def enhance_image(
    img: Image,
    neighbor_lumas: list[np.ndarray],
    params: EnhanceParams,
) -> tuple[Image, Optional[str]]:
    """Enhance one frame given its neighbors' quantized luma planes.

    Returns the finished crop_target x crop_target RGB frame and None, or
    the geometry-only frame plus a reason when mixing was skipped.
    """
    skipped = None
    out = img
    if img.channels != 3:
        skipped = "not_rgb"
    elif not neighbor_lumas:
        skipped = "no_temporal_neighbors"
    elif any(p.shape != img.pixels.shape[:2] for p in neighbor_lumas):
        skipped = "window_shape_mismatch"
    elif params.beta != 0.0:
        ycc = rgb_to_ycrcb(img)
        mu = window_mean_luma(neighbor_lumas)
        mixed = enhance_luma(ycc.pixels[:, :, 0], mu, params.beta)
        if not np.array_equal(mixed, ycc.pixels[:, :, 0]):
            planes = np.stack([mixed, ycc.pixels[:, :, 1], ycc.pixels[:, :, 2]], axis=2)
            out = ycrcb_to_rgb(Image(planes, "YCrCb"))
    out = bottom_center_crop(out)
    out = resize(out, params.crop_target, params.crop_target)
    return out, skipped


def enhance_catalog(
    catalog: Catalog,
    params: EnhanceParams,
    out_dir,
    jobs: int = 1,
    loader: Callable[[str], Image] = load_image,
) -> tuple[Catalog, list[EnhanceIssue]]:
    """Run the enhancement stage over a filtered catalog.

    Writes one PNG per record under out_dir (mirroring record ids) and
    returns the enhanced-stage catalog plus the issue list. Frames whose
    window is empty or unusable are cropped and resized but not mixed, and
    carry an "unenhanced" marker. Unreadable frames are dropped with an
    issue. Output is byte-identical for any jobs value.
    """
    out_dir = Path(out_dir)
    tasks = []
    for site, recs in catalog.sites.items():
        for idx, rec in enumerate(recs):
            tasks.append((rec, recs, idx))

    def run(task):
        rec, recs, idx = task
        try:
            img = loader(rec.path)
        except Exception as exc:
            return rec, None, f"load_failed: {exc}"
        lumas = []
        window_reason = None
        if img.channels == 3:
            for nb in temporal_window(recs, idx, params.alpha, params.lookaround_hours):
                try:
                    nb_img = loader(nb.path)
                except Exception:
                    continue
                if nb_img.channels != 3:
                    continue
                lumas.append(rgb_to_ycrcb(nb_img).pixels[:, :, 0])
        out, skipped = enhance_image(img, lumas, params)
        out_path = (out_dir / rec.id).with_suffix(".png")
        save_png(out, out_path)
        new_rec = replace(
            rec,
            path=str(out_path),
            stage="enhanced",
            markers=sorted(set(rec.markers) | ({"unenhanced"} if skipped else set())),
        )
        return rec, new_rec, skipped

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    issues = []
    out_records = []
    for rec, new_rec, reason in results:
        if new_rec is None:
            issues.append(EnhanceIssue(rec.id, reason))
            continue
        if reason:
            issues.append(EnhanceIssue(rec.id, reason))
        out_records.append(new_rec)
    issues.sort(key=lambda i: (i.record_id, i.reason))
    return Catalog.from_records(out_records), issues
