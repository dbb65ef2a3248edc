"""Image catalog: ingest, manifest persistence, and timeline validation.

Builds a site-indexed, time-ordered manifest of river camera frames from a
directory tree, recovers site ids and timestamps from filenames (EXIF as
fallback), and checks timeline sanity before any pixel work happens.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image as PILImage

LABEL_SET = (1, 2, 3, 4, 5, 6)

# The seven gate flags, in report order. Anything else found in a manifest's
# quality array is a non-gating marker (e.g. "unenhanced").
FLAG_NAMES = (
    "overexposed",
    "underexposed",
    "grayscale",
    "blurred",
    "flared",
    "triggered",
    "bad_timestamp",
)

STAGES = ("raw", "filtered", "enhanced", "augmented")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}

EPOCH_FLOOR = datetime(2000, 1, 1, tzinfo=timezone.utc)

# EXIF tag ids: Exif IFD pointer and DateTimeOriginal / DateTime.
_EXIF_IFD = 0x8769
_TAG_DATETIME_ORIGINAL = 36867
_TAG_DATETIME = 306


class CatalogError(ValueError):
    """Invalid catalog contents or arguments."""


class IngestError(CatalogError):
    """Ingest cannot produce a usable catalog."""


@dataclass
class QualityFlags:
    """The seven per-record quality failure flags. A record passes the gate
    iff all seven are false."""

    overexposed: bool = False
    underexposed: bool = False
    grayscale: bool = False
    blurred: bool = False
    flared: bool = False
    triggered: bool = False
    bad_timestamp: bool = False

    def passes(self) -> bool:
        return not any(getattr(self, name) for name in FLAG_NAMES)

    def active(self) -> list[str]:
        """Names of the raised flags, in canonical order."""
        return [name for name in FLAG_NAMES if getattr(self, name)]

    @classmethod
    def from_names(cls, names) -> "QualityFlags":
        flags = cls()
        for name in names:
            if name not in FLAG_NAMES:
                raise CatalogError(f"unknown quality flag: {name!r}")
            setattr(flags, name, True)
        return flags


@dataclass
class Image:
    """8-bit pixel frame: (h, w, c) uint8 array plus a colorspace tag.

    channels is 1 or 3; colorspace applies to 3-channel data.
    """

    pixels: np.ndarray
    colorspace: str = "RGB"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, np.newaxis]
        if px.ndim != 3:
            raise CatalogError(f"pixel array must be 2-D or 3-D, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise CatalogError(f"pixels must be uint8, got {px.dtype}")
        h, w, c = px.shape
        if h < 1 or w < 1:
            raise CatalogError("image dimensions must be at least 1x1")
        if c not in (1, 3):
            raise CatalogError(f"channel count must be 1 or 3, got {c}")
        if self.colorspace not in ("RGB", "YCrCb"):
            raise CatalogError(f"unknown colorspace {self.colorspace!r}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def luma(self) -> np.ndarray:
        """Real-valued luma plane (float64, h x w).

        BT.601 weights for RGB; channel 0 for YCrCb; the sole channel for
        single-channel frames. Not quantized.
        """
        px = self.pixels.astype(np.float64)
        if self.channels == 1:
            return px[:, :, 0]
        if self.colorspace == "YCrCb":
            return px[:, :, 0]
        return 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]

    def copy(self) -> "Image":
        return Image(self.pixels.copy(), self.colorspace)


def load_image(path) -> Image:
    """Read a PNG/JPEG from disk. Grayscale files keep one channel; anything
    else is converted to RGB."""
    with PILImage.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im)
        else:
            arr = np.asarray(im.convert("RGB"))
    return Image(arr)


def save_png(img: Image, path) -> None:
    """Write an RGB or single-channel frame as PNG."""
    if img.colorspace != "RGB":
        raise CatalogError("only RGB or grayscale frames are written to disk")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    PILImage.fromarray(arr).save(path)


@dataclass
class ImageRecord:
    """One photo: identity, site, capture time, pixel path, optional label."""

    id: str
    site_id: str
    captured_at: datetime
    path: str
    label: Optional[int] = None
    quality: QualityFlags = field(default_factory=QualityFlags)
    stage: str = "raw"
    parent_id: Optional[str] = None
    markers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.label is not None and self.label not in LABEL_SET:
            raise CatalogError(f"label {self.label!r} outside {{1..6}} for {self.id}")
        if self.stage not in STAGES:
            raise CatalogError(f"unknown stage {self.stage!r} for {self.id}")
        if self.captured_at.tzinfo is None:
            raise CatalogError(f"captured_at must be timezone-aware for {self.id}")


@dataclass
class Catalog:
    """Per-site, time-ordered collections of records.

    Within each site, records are sorted ascending by captured_at with ties
    broken by id; sites iterate in sorted order. Built via from_records.
    """

    sites: dict[str, list[ImageRecord]]

    @classmethod
    def from_records(cls, records) -> "Catalog":
        records = list(records)
        seen: set[str] = set()
        for rec in records:
            if rec.id in seen:
                raise CatalogError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
        for rec in records:
            if rec.stage == "augmented":
                if rec.parent_id is None or rec.parent_id not in seen:
                    raise CatalogError(
                        f"augmented record {rec.id!r} references missing parent "
                        f"{rec.parent_id!r}"
                    )
        sites: dict[str, list[ImageRecord]] = {}
        for rec in records:
            sites.setdefault(rec.site_id, []).append(rec)
        ordered = {}
        for site in sorted(sites):
            ordered[site] = sorted(sites[site], key=lambda r: (r.captured_at, r.id))
        return cls(ordered)

    @property
    def images_total(self) -> int:
        return sum(len(recs) for recs in self.sites.values())

    def records(self) -> Iterator[ImageRecord]:
        """All records in canonical (site, captured_at, id) order."""
        for site in self.sites:
            yield from self.sites[site]

    def labeled(self) -> Iterator[ImageRecord]:
        for rec in self.records():
            if rec.label is not None:
                yield rec

    def by_id(self) -> dict[str, ImageRecord]:
        return {rec.id: rec for rec in self.records()}

    def subset(self, site_ids) -> "Catalog":
        """New catalog restricted to the given sites."""
        wanted = set(site_ids)
        return Catalog.from_records(
            rec for rec in self.records() if rec.site_id in wanted
        )


_DEFAULT_PATTERN = re.compile(r"^(?P<site>.+)_(?P<date>\d{8})-(?P<time>\d{6})$")


@dataclass
class NamingRule:
    """How site id and capture time are recovered from a file.

    The filename pattern (stem match, named groups site/date/time) is
    authoritative; EXIF DateTimeOriginal is the fallback, with the parent
    directory supplying the site id.
    """

    pattern: re.Pattern = _DEFAULT_PATTERN
    exif_fallback: bool = True

    def parse(self, path: Path, root: Path) -> tuple[str, datetime]:
        m = self.pattern.match(path.stem)
        if m:
            stamp = m.group("date") + m.group("time")
            try:
                ts = datetime.strptime(stamp, "%Y%m%d%H%M%S").replace(
                    tzinfo=timezone.utc
                )
            except ValueError as exc:
                raise IngestError(f"bad timestamp in filename {path.name!r}: {exc}")
            return m.group("site"), ts
        if self.exif_fallback:
            ts = _exif_timestamp(path)
            if ts is not None:
                parent = path.parent
                if parent != root:
                    return parent.name, ts
                raise IngestError(
                    f"{path.name!r}: EXIF timestamp found but no site id "
                    "(file not under a site directory)"
                )
        raise IngestError(f"{path.name!r}: filename unparseable and no usable EXIF")


def _exif_timestamp(path: Path) -> Optional[datetime]:
    try:
        with PILImage.open(path) as im:
            exif = im.getexif()
            raw = exif.get_ifd(_EXIF_IFD).get(_TAG_DATETIME_ORIGINAL)
            if raw is None:
                raw = exif.get(_TAG_DATETIME)
    except Exception:
        return None
    if not raw:
        return None
    try:
        return datetime.strptime(str(raw), "%Y:%m:%d %H:%M:%S").replace(
            tzinfo=timezone.utc
        )
    except ValueError:
        return None


@dataclass
class IngestIssue:
    """A file ingest could not use, with the reason. Never silently dropped."""

    path: str
    reason: str


def ingest(
    root_dir,
    naming: Optional[NamingRule] = None,
    labels_csv=None,
) -> tuple[Catalog, list[IngestIssue]]:
    """Scan a directory tree into a Catalog.

    Every readable PNG/JPEG whose site/timestamp can be recovered becomes a
    raw-stage record with id = path relative to root_dir. Unreadable or
    unparseable files are returned as IngestIssues. labels_csv, when given,
    maps record id -> label (columns id,label).

    Raises IngestError on a missing directory, zero parseable images, or a
    (site_id, captured_at, filename) collision.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise IngestError(f"missing directory: {root}")
    naming = naming or NamingRule()

    labels: dict[str, int] = {}
    issues: list[IngestIssue] = []
    if labels_csv is not None:
        labels, label_issues = _read_labels(labels_csv)
        issues.extend(label_issues)

    records = []
    seen_keys: dict[tuple, str] = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        rel = path.relative_to(root).as_posix()
        try:
            with PILImage.open(path) as im:
                im.verify()
        except Exception as exc:
            issues.append(IngestIssue(rel, f"unreadable: {exc}"))
            continue
        try:
            site, ts = naming.parse(path, root)
        except IngestError as exc:
            issues.append(IngestIssue(rel, str(exc)))
            continue
        key = (site, ts, path.name)
        if key in seen_keys:
            raise IngestError(
                f"duplicate (site, captured_at, filename) collision: "
                f"{rel!r} vs {seen_keys[key]!r}"
            )
        seen_keys[key] = rel
        records.append(
            ImageRecord(
                id=rel,
                site_id=site,
                captured_at=ts,
                path=str(path.resolve()),
                label=labels.get(rel),
            )
        )

    if not records:
        raise IngestError(f"zero parseable images under {root}")
    for rel in sorted(set(labels) - {r.id for r in records}):
        issues.append(IngestIssue(rel, "label references no ingested image"))
    return Catalog.from_records(records), issues


def _read_labels(labels_csv) -> tuple[dict[str, int], list[IngestIssue]]:
    labels: dict[str, int] = {}
    issues: list[IngestIssue] = []
    with open(labels_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rid = row.get("id", "").strip()
            raw = row.get("label", "").strip()
            if not rid:
                continue
            if not raw:
                continue
            try:
                value = int(raw)
            except ValueError:
                issues.append(IngestIssue(rid, f"non-integer label {raw!r}"))
                continue
            if value not in LABEL_SET:
                issues.append(IngestIssue(rid, f"label {value} outside {{1..6}}"))
                continue
            labels[rid] = value
    return labels, issues


def dataset_distribution(catalog: Catalog, invert_indicator: bool = False):
    """Probability vector over the six labels (Catalog-wide, labeled records).

    invert_indicator flips the per-record indicator to count complements
    instead of matches (audit switch; result is renormalized to sum to 1).
    """
    counts = np.zeros(6, dtype=np.int64)
    total = 0
    for rec in catalog.labeled():
        counts[rec.label - 1] += 1
        total += 1
    if total == 0:
        raise CatalogError("no labeled records")
    if invert_indicator:
        counts = total - counts
    return counts / counts.sum()


@dataclass
class TimelineViolation:
    record_id: str
    site_id: str
    reason: str


def timeline_violations(catalog: Catalog, now: Optional[datetime] = None) -> list[TimelineViolation]:
    """Pure scan for timeline problems; does not touch any flags.

    Flags three conditions per site: file-sequence order disagreeing with
    captured_at order, timestamps outside [2000-01-01, now], and duplicate
    timestamps.
    """
    now = now or datetime.now(timezone.utc)
    violations = []
    for site, recs in catalog.sites.items():
        by_time: dict[datetime, list[ImageRecord]] = {}
        for rec in recs:
            by_time.setdefault(rec.captured_at, []).append(rec)
        for ts, group in by_time.items():
            if len(group) > 1:
                for rec in group:
                    violations.append(
                        TimelineViolation(rec.id, site, "duplicate_timestamp")
                    )
        for rec in recs:
            if rec.captured_at < EPOCH_FLOOR or rec.captured_at > now:
                violations.append(
                    TimelineViolation(rec.id, site, "timestamp_out_of_range")
                )
        # Camera file numbering should be monotone in capture time; walk the
        # path-ordered sequence and flag records that move backwards.
        running = None
        for rec in sorted(recs, key=lambda r: r.path):
            if running is not None and rec.captured_at < running:
                violations.append(
                    TimelineViolation(rec.id, site, "file_order_mismatch")
                )
            else:
                running = rec.captured_at
    violations.sort(key=lambda v: (v.site_id, v.record_id, v.reason))
    return violations


def validate_timeline(catalog: Catalog, now: Optional[datetime] = None) -> list[TimelineViolation]:
    """Quality filter 7: report timeline violations and raise bad_timestamp
    on the offending records."""
    violations = timeline_violations(catalog, now)
    flagged = {v.record_id for v in violations}
    for rec in catalog.records():
        if rec.id in flagged:
            rec.quality.bad_timestamp = True
    return violations


def _iso_z(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_iso_z(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)


def record_to_json(rec: ImageRecord, base: Optional[Path] = None) -> str:
    """base: pixel paths under it are stored relative, which keeps
    manifests byte-stable across working directories."""
    path = rec.path
    if base is not None:
        try:
            path = Path(rec.path).resolve().relative_to(base).as_posix()
        except ValueError:
            pass
    payload = {
        "id": rec.id,
        "site_id": rec.site_id,
        "captured_at": _iso_z(rec.captured_at),
        "path": path,
        "label": rec.label,
        "quality": rec.quality.active() + sorted(rec.markers),
        "stage": rec.stage,
        "parent_id": rec.parent_id,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def record_from_json(line: str, base: Optional[Path] = None) -> ImageRecord:
    payload = json.loads(line)
    flag_names = [n for n in payload["quality"] if n in FLAG_NAMES]
    markers = [n for n in payload["quality"] if n not in FLAG_NAMES]
    path = payload["path"]
    if base is not None and not Path(path).is_absolute():
        path = str(base / path)
    return ImageRecord(
        id=payload["id"],
        site_id=payload["site_id"],
        captured_at=_parse_iso_z(payload["captured_at"]),
        path=path,
        label=payload["label"],
        quality=QualityFlags.from_names(flag_names),
        stage=payload["stage"],
        parent_id=payload["parent_id"],
        markers=markers,
    )


def write_manifest(catalog: Catalog, path) -> None:
    """Persist as JSON Lines in canonical record order (UTF-8, one record
    per line). Pixel paths under the manifest's directory are stored
    relative to it, so the file is byte-stable for identical pixel content
    no matter where the working directory lives."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.resolve().parent
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in catalog.records():
            fh.write(record_to_json(rec, base) + "\n")


def read_manifest(path) -> Catalog:
    path = Path(path)
    base = path.resolve().parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_json(line, base))
    return Catalog.from_records(records)
