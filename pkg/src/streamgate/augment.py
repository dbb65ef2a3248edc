"""Training-set augmentation and class balancing.

Each synthetic frame is made by reflection-padding, rotating by a small
random multiple of five degrees, upscaling, cropping back to the original
square, and maybe mirroring horizontally. Never vertically: gravity makes
upside-down rivers worthless as training signal. Balancing tops up minority
labels with synthetic frames and can thin majority labels by sampling.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
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
from streamgate.enhance import resize, rgb_to_ycrcb, ycrcb_to_rgb


class AugmentError(CatalogError):
    """Bad augmentation parameters or an illegal target split."""


@dataclass
class AugmentParams:
    """pad_frac: reflection padding per edge before rotation, as a fraction
    of the side (rounded up), sized so rotated corners never sample outside.
    angle_step/max_angle: rotations are signed non-zero multiples of
    angle_step up to max_angle.
    rescale: upscale factor applied after rotation, before the crop back.
    flip_prob: chance of a horizontal mirror.
    equalize: optional global luma histogram equalization on the generated
    frames (off by default).
    """

    pad_frac: float = 0.15
    angle_step: int = 5
    max_angle: int = 30
    rescale: float = 1.3
    flip_prob: float = 0.5
    equalize: bool = False

    def __post_init__(self):
        if not 0.0 < self.pad_frac < 1.0:
            raise AugmentError(f"pad_frac must be in (0, 1), got {self.pad_frac}")
        if self.angle_step < 1 or self.max_angle < self.angle_step:
            raise AugmentError("need max_angle >= angle_step >= 1")
        if self.max_angle % self.angle_step != 0:
            raise AugmentError("max_angle must be a multiple of angle_step")
        if self.rescale < 1.0:
            raise AugmentError(f"rescale must be >= 1, got {self.rescale}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise AugmentError(f"flip_prob must be in [0, 1], got {self.flip_prob}")

    def angle_choices(self) -> list[int]:
        steps = range(self.angle_step, self.max_angle + 1, self.angle_step)
        return [-a for a in steps] + [a for a in steps]

    def to_dict(self) -> dict:
        return {
            "pad_frac": self.pad_frac,
            "angle_step": self.angle_step,
            "max_angle": self.max_angle,
            "rescale": self.rescale,
            "flip_prob": self.flip_prob,
            "equalize": self.equalize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentParams":
        return cls(**d)


def reflect_pad(img: Image, pad: int) -> Image:
    if pad < 1:
        raise AugmentError("pad must be positive")
    px = np.pad(img.pixels, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    return Image(px, img.colorspace)


def rotate_image(img: Image, degrees: float) -> Image:
    """Rotate about the frame center, bilinear, edges clamped.

    Callers pad first so that anything the clamp smears gets cropped away.
    """
    if degrees == 0.0:
        return img.copy()
    h, w = img.height, img.width
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dx = jj - cx
    dy = ii - cy
    sx = cx + cos_t * dx + sin_t * dy
    sy = cy - sin_t * dx + cos_t * dy
    return Image(_bilinear_sample(img.pixels, sy, sx), img.colorspace)


def _bilinear_sample(pixels: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    src = pixels.astype(np.float64)
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, :, np.newaxis]
    fx = (sx - x0)[:, :, np.newaxis]
    top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return np.clip(np.floor(out + 0.5), 0.0, 255.0).astype(np.uint8)


def center_crop(img: Image, height: int, width: int) -> Image:
    if height > img.height or width > img.width:
        raise AugmentError(
            f"crop {height}x{width} exceeds frame {img.height}x{img.width}"
        )
    y0 = (img.height - height) // 2
    x0 = (img.width - width) // 2
    return Image(img.pixels[y0 : y0 + height, x0 : x0 + width].copy(), img.colorspace)


def hflip(img: Image) -> Image:
    return Image(np.ascontiguousarray(img.pixels[:, ::-1]), img.colorspace)


def equalize_luma(img: Image) -> Image:
    """Global histogram equalization on the luma channel, chroma untouched."""
    if img.channels != 3 or img.colorspace != "RGB":
        raise AugmentError("equalize_luma expects an RGB frame")
    ycc = rgb_to_ycrcb(img)
    y = ycc.pixels[:, :, 0]
    hist = np.bincount(y.ravel(), minlength=256)
    cdf = hist.cumsum()
    nonzero = cdf[cdf > 0]
    if nonzero.size == 0 or nonzero[0] == cdf[-1]:
        return img.copy()
    cdf_min = nonzero[0]
    lut = np.floor((cdf - cdf_min) / (cdf[-1] - cdf_min) * 255.0 + 0.5)
    lut = np.clip(lut, 0.0, 255.0).astype(np.uint8)
    planes = np.stack([lut[y], ycc.pixels[:, :, 1], ycc.pixels[:, :, 2]], axis=2)
    return ycrcb_to_rgb(Image(planes, "YCrCb"))


def augment_image(
    img: Image,
    rng: np.random.Generator,
    params: Optional[AugmentParams] = None,
    angle: Optional[int] = None,
    flip: Optional[bool] = None,
) -> Image:
    """One augmented variant of a frame, same size as the input.

    angle and flip override the random draws (test hooks). A zero angle
    skips the whole pad/rotate/rescale/crop chain, so flipping alone is an
    exact column mirror; random draws never produce zero.
    """
    params = params or AugmentParams()
    if angle is None:
        choices = params.angle_choices()
        angle = int(choices[rng.integers(0, len(choices))])
    if abs(angle) > params.max_angle or angle % params.angle_step != 0:
        raise AugmentError(f"angle {angle} not a legal multiple of {params.angle_step}")
    if flip is None:
        flip = bool(rng.random() < params.flip_prob)

    out = img
    if angle != 0:
        h, w = img.height, img.width
        pad = math.ceil(params.pad_frac * max(h, w))
        out = reflect_pad(out, pad)
        out = rotate_image(out, float(angle))
        out = resize(
            out,
            int(round(out.height * params.rescale)),
            int(round(out.width * params.rescale)),
        )
        out = center_crop(out, h, w)
    if flip:
        out = hflip(out)
    if params.equalize:
        out = equalize_luma(out)
    return out


@dataclass
class PlanEntry:
    label: int
    count: int
    target: int
    keep: int
    generate: int


@dataclass
class BalancePlan:
    """Per-label arithmetic for balancing: how many originals to keep and
    how many synthetic frames to generate. keep + generate == target."""

    entries: dict[int, PlanEntry]
    target: int

    def total_generate(self) -> int:
        return sum(e.generate for e in self.entries.values())


def build_balance_plan(catalog: Catalog, target: Optional[int] = None) -> BalancePlan:
    """Plan a balanced set: every label present ends at target records
    (default: the majority label's count). Labels over target are sampled
    down; labels under it are topped up with synthetic frames."""
    counts: dict[int, int] = {}
    for rec in catalog.labeled():
        counts[rec.label] = counts.get(rec.label, 0) + 1
    if not counts:
        raise AugmentError("no labeled records to balance")
    if target is None:
        target = max(counts.values())
    if target < 1:
        raise AugmentError("target must be positive")
    entries = {}
    for label in sorted(counts):
        n = counts[label]
        keep = min(n, target)
        entries[label] = PlanEntry(label, n, target, keep, target - keep)
    return BalancePlan(entries, target)


@dataclass
class AugmentIssue:
    record_id: str
    reason: str


def apply_balance(
    catalog: Catalog,
    plan: BalancePlan,
    params: AugmentParams,
    out_dir,
    seed: int = 0,
    partition_name: str = "train",
    jobs: int = 1,
    loader: Callable[[str], Image] = load_image,
) -> tuple[Catalog, list[AugmentIssue]]:
    """Execute a balance plan over one split's catalog.

    Kept originals pass through untouched; synthetic children are written
    as PNGs under out_dir with ids {parent}#augNNN and parent round-robin
    over the label's originals (sorted by id). Each child's transforms are
    seeded from (seed, child id), so output bytes do not depend on job
    count or generation order. Validation data is never augmented; passing
    partition_name="val" raises.
    """
    if partition_name == "val":
        raise AugmentError("validation data is never augmented")
    by_label: dict[int, list[ImageRecord]] = {}
    for rec in catalog.labeled():
        by_label.setdefault(rec.label, []).append(rec)
    for label in plan.entries:
        if label not in by_label:
            raise AugmentError(f"plan references label {label} with no records")

    out_dir = Path(out_dir)
    kept: list[ImageRecord] = []
    children_spec: list[tuple[ImageRecord, str]] = []
    for label in sorted(plan.entries):
        entry = plan.entries[label]
        originals = sorted(by_label[label], key=lambda r: r.id)
        if entry.keep < len(originals):
            rng = np.random.default_rng(np.random.SeedSequence([seed, label]))
            picked = rng.choice(len(originals), size=entry.keep, replace=False)
            originals_kept = [originals[i] for i in sorted(picked.tolist())]
        else:
            originals_kept = originals
        kept.extend(originals_kept)
        per_parent: dict[str, int] = {}
        for k in range(entry.generate):
            parent = originals_kept[k % len(originals_kept)]
            idx = per_parent.get(parent.id, 0)
            per_parent[parent.id] = idx + 1
            children_spec.append((parent, f"{parent.id}#aug{idx:03d}"))

    def make_child(spec: tuple[ImageRecord, str]):
        parent, child_id = spec
        try:
            img = loader(parent.path)
        except Exception as exc:
            return None, AugmentIssue(child_id, f"load_failed: {exc}")
        digest = hashlib.sha256(child_id.encode("utf-8")).digest()
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, int.from_bytes(digest[:8], "big")])
        )
        out = augment_image(img, rng, params)
        out_path = out_dir / f"{child_id}.png"
        save_png(out, out_path)
        rec = replace(
            parent,
            id=child_id,
            path=str(out_path),
            stage="augmented",
            parent_id=parent.id,
            markers=[],
        )
        return rec, None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(make_child, children_spec))
    else:
        results = [make_child(s) for s in children_spec]

    issues = [issue for _, issue in results if issue is not None]
    child_records = [rec for rec, _ in results if rec is not None]
    issues.sort(key=lambda i: i.record_id)
    return Catalog.from_records(kept + child_records), issues
