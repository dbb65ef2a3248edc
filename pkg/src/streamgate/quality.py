"""Quality gate: drop frames a classifier should never train on.

Seven independent failure checks per frame: overexposed, underexposed,
grayscale, blurred, flared, motion-triggered (off the capture schedule),
and bad timestamp. A frame passes the gate only when all seven are clear.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from streamgate.catalog import (
    FLAG_NAMES,
    Catalog,
    CatalogError,
    Image,
    ImageRecord,
    QualityFlags,
    load_image,
    timeline_violations,
)
from streamgate.enhance import rgb_to_ycrcb

__all__ = [
    "QualityFlags",
    "QualityConfig",
    "QualityReport",
    "exposure_stats",
    "is_overexposed",
    "is_underexposed",
    "is_grayscale",
    "blur_score",
    "flare_score",
    "detect_triggered",
    "apply_quality_gate",
]


@dataclass
class QualityConfig:
    """Thresholds for the gate. Defaults are tuned for outdoor daylight
    river cameras; every field is overridable from the CLI config."""

    over_mean_luma: float = 235.0
    over_clip_frac: float = 0.30
    under_mean_luma: float = 20.0
    under_clip_frac: float = 0.30
    chroma_std_max: float = 2.0
    chroma_offset_max: float = 4.0
    blur_lapvar_min: float = 100.0
    flare_luma_min: int = 250
    flare_blob_frac: float = 0.05
    schedule_tolerance: float = 5.0

    def __post_init__(self):
        for name in (
            "over_clip_frac",
            "under_clip_frac",
            "flare_blob_frac",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise CatalogError(f"{name} must be in [0, 1], got {value}")
        if self.schedule_tolerance < 0:
            raise CatalogError("schedule_tolerance must be >= 0")

    def to_dict(self) -> dict:
        return {
            "over_mean_luma": self.over_mean_luma,
            "over_clip_frac": self.over_clip_frac,
            "under_mean_luma": self.under_mean_luma,
            "under_clip_frac": self.under_clip_frac,
            "chroma_std_max": self.chroma_std_max,
            "chroma_offset_max": self.chroma_offset_max,
            "blur_lapvar_min": self.blur_lapvar_min,
            "flare_luma_min": self.flare_luma_min,
            "flare_blob_frac": self.flare_blob_frac,
            "schedule_tolerance": self.schedule_tolerance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QualityConfig":
        return cls(**d)


def exposure_stats(img: Image) -> tuple[float, float, float]:
    """(mean luma, fraction of pixels >= 250, fraction <= 5).

    Luma is the real-valued BT.601 plane, not quantized.
    """
    luma = img.luma()
    n = luma.size
    return (
        float(luma.mean()),
        float(np.count_nonzero(luma >= 250.0)) / n,
        float(np.count_nonzero(luma <= 5.0)) / n,
    )


def is_overexposed(img: Image, cfg: QualityConfig) -> bool:
    mean, bright, _ = exposure_stats(img)
    return mean >= cfg.over_mean_luma or bright >= cfg.over_clip_frac


def is_underexposed(img: Image, cfg: QualityConfig) -> bool:
    mean, _, dark = exposure_stats(img)
    return mean <= cfg.under_mean_luma or dark >= cfg.under_clip_frac


def is_grayscale(img: Image, cfg: QualityConfig) -> bool:
    """True when the frame carries no usable color.

    Single-channel frames are grayscale by definition. RGB frames are
    flagged when both chroma planes are flat (low std) AND centered on the
    neutral value; a strong constant tint therefore still counts as color.
    """
    if img.channels == 1:
        return True
    ycc = rgb_to_ycrcb(img).pixels.astype(np.float64)
    cr, cb = ycc[:, :, 1], ycc[:, :, 2]
    return (
        cr.std() < cfg.chroma_std_max
        and cb.std() < cfg.chroma_std_max
        and np.abs(cr - 128.0).mean() < cfg.chroma_offset_max
        and np.abs(cb - 128.0).mean() < cfg.chroma_offset_max
    )


def blur_score(img: Image) -> float:
    """Variance of the 3x3 Laplacian over the luma plane (valid region only).

    Sharp frames score in the hundreds or above; defocused or smeared
    frames collapse toward zero. Frames smaller than 3x3 score 0.
    """
    luma = img.luma()
    if luma.shape[0] < 3 or luma.shape[1] < 3:
        return 0.0
    lap = (
        luma[:-2, 1:-1]
        + luma[2:, 1:-1]
        + luma[1:-1, :-2]
        + luma[1:-1, 2:]
        - 4.0 * luma[1:-1, 1:-1]
    )
    return float(lap.var())


def flare_score(img: Image, luma_min: int = 250) -> float:
    """Area fraction of the largest 4-connected blob of near-saturated luma.

    Scattered hot pixels stay near zero; a lens flare or sun glint forms
    one large blob.
    """
    mask = img.luma() >= float(luma_min)
    if not mask.any():
        return 0.0
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return 0.0
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    return float(sizes.max()) / mask.size


def is_blurred(img: Image, cfg: QualityConfig) -> bool:
    return blur_score(img) < cfg.blur_lapvar_min


def is_flared(img: Image, cfg: QualityConfig) -> bool:
    return flare_score(img, cfg.flare_luma_min) >= cfg.flare_blob_frac


def detect_triggered(
    site_records: list[ImageRecord], tolerance_minutes: float
) -> set[str]:
    """Ids of frames that broke the hourly capture schedule at one site.

    The scheduled shot for a clock-hour slot is the frame closest to the
    top of the hour; every other frame in that slot is flagged, as is any
    frame strictly more than tolerance_minutes past the hour.
    """
    flagged: set[str] = set()
    slots: dict[datetime, list[tuple[float, str]]] = {}
    for rec in site_records:
        ts = rec.captured_at
        slot = ts.replace(minute=0, second=0, microsecond=0)
        offset = (ts - slot).total_seconds() / 60.0
        if offset > tolerance_minutes:
            flagged.add(rec.id)
        slots.setdefault(slot, []).append((offset, rec.id))
    for group in slots.values():
        if len(group) > 1:
            group.sort()
            flagged.update(rid for _, rid in group[1:])
    return flagged


@dataclass
class QualityReport:
    """Outcome of one gate run: what was kept, what fell, and why."""

    total: int
    kept: int
    flag_counts: dict[str, int]
    flagged: dict[str, list[str]]
    unreadable: list[str] = field(default_factory=list)

    @property
    def dropped(self) -> int:
        return self.total - self.kept

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "kept": self.kept,
            "dropped": self.dropped,
            "flag_counts": {k: self.flag_counts[k] for k in FLAG_NAMES},
            "flagged": {k: self.flagged[k] for k in sorted(self.flagged)},
            "unreadable": sorted(self.unreadable),
        }


def apply_quality_gate(
    catalog: Catalog,
    cfg: Optional[QualityConfig] = None,
    jobs: int = 1,
    loader: Callable[[str], Image] = load_image,
    now: Optional[datetime] = None,
) -> tuple[Catalog, QualityReport]:
    """Run all seven checks and keep only clean frames.

    The input catalog is not modified; kept records are re-staged as
    "filtered" with clear flags. The report lists every raised flag per
    record. Unreadable files are dropped and reported separately. Results
    are identical for any jobs value.
    """
    cfg = cfg or QualityConfig()
    records = list(catalog.records())

    def pixel_flags(rec: ImageRecord):
        try:
            img = loader(rec.path)
        except Exception:
            return rec.id, None
        flags = QualityFlags(
            overexposed=is_overexposed(img, cfg),
            underexposed=is_underexposed(img, cfg),
            grayscale=is_grayscale(img, cfg),
            blurred=is_blurred(img, cfg),
            flared=is_flared(img, cfg),
        )
        return rec.id, flags

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(pixel_flags, records))
    else:
        results = dict(pixel_flags(rec) for rec in records)

    triggered: set[str] = set()
    for site_records in catalog.sites.values():
        triggered |= detect_triggered(site_records, cfg.schedule_tolerance)
    bad_ts = {v.record_id for v in timeline_violations(catalog, now)}

    kept: list[ImageRecord] = []
    flag_counts = {name: 0 for name in FLAG_NAMES}
    flagged: dict[str, list[str]] = {}
    unreadable: list[str] = []
    for rec in records:
        flags = results[rec.id]
        if flags is None:
            unreadable.append(rec.id)
            continue
        flags.triggered = rec.id in triggered
        flags.bad_timestamp = rec.id in bad_ts
        active = flags.active()
        for name in active:
            flag_counts[name] += 1
        if active:
            flagged[rec.id] = active
        else:
            kept.append(replace(rec, stage="filtered", quality=QualityFlags()))

    report = QualityReport(
        total=len(records),
        kept=len(kept),
        flag_counts=flag_counts,
        flagged=flagged,
        unreadable=unreadable,
    )
    return Catalog.from_records(kept), report
