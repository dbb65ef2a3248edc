"""Synthetic river camera corpus for end-to-end checks.

Generates a few fixed cameras shooting hourly frames: a tinted textured
scene with a water band along the bottom whose brightness tracks the
connectivity label (dim water = disconnected, bright = connected). A known
subset of frames is corrupted, one defect type per frame, so the quality
gate's recall can be measured exactly. Everything is deterministic in the
seed; truth (labels, defect types) is written next to the images.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy import ndimage

from streamgate.catalog import Image, save_png

SITE_NAMES = ("alder", "birch", "cedar", "drava", "esker", "flume")

# Water-band luma per connectivity label; 1..3 sit below the binary
# boundary, 4..6 above it, 30 apart so labels stay separable under noise.
BAND_LUMA = {1: 40.0, 2: 70.0, 3: 100.0, 4: 160.0, 5: 190.0, 6: 220.0}

# (R, B) offsets about the base luma giving each site its own color cast,
# strong enough that clean frames never read as grayscale.
SITE_TINTS = ((12, -8), (-12, 10), (8, 14), (-10, -12), (14, -14), (-8, 8))

DEFECT_TYPES = (
    "underexposed",
    "overexposed",
    "grayscale",
    "blurred",
    "flared",
    "triggered",
    "bad_timestamp",
)

_LABEL_PATTERN = (1, 2, 3, 4, 5, 6, 5, 4, 3, 2)
_START = datetime(2024, 6, 1, 8, 0, tzinfo=timezone.utc)
_NOISE_STD = 8.0


@dataclass
class CorpusSpec:
    sites: int = 6
    frames_per_site: int = 100
    height: int = 96
    width: int = 128
    defect_period: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.sites <= len(SITE_NAMES):
            raise ValueError(f"sites must be in 1..{len(SITE_NAMES)}")
        if self.frames_per_site < 4:
            raise ValueError("frames_per_site must be at least 4")
        if self.height < 32 or self.width < 32:
            raise ValueError("frames must be at least 32x32")
        if self.defect_period < 2:
            raise ValueError("defect_period must be at least 2")


def small_corpus_spec(seed: int = 0) -> CorpusSpec:
    """Three-site corpus small enough for smoke tests."""
    return CorpusSpec(sites=3, frames_per_site=36, defect_period=12, seed=seed)


def _site_labels(site_index: int, frames: int) -> list[int]:
    """Slowly varying label walk; run length differs per site so the sites'
    label distributions are not identical."""
    run = 4 + site_index % 3
    labels = []
    for t in range(frames):
        step = t // run + site_index
        labels.append(_LABEL_PATTERN[step % len(_LABEL_PATTERN)])
    return labels


def _clean_frame(
    spec: CorpusSpec, site_index: int, t: int, label: int, rng: np.random.Generator
) -> np.ndarray:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    fx = 1.5 + 0.5 * site_index
    fy = 1.0 + 0.25 * site_index
    phase = site_index * 0.7
    base = 120.0 + 25.0 * np.sin(2 * math.pi * (fx * xx / w + phase)) * np.cos(
        2 * math.pi * (fy * yy / h)
    )
    band_top = int(round(0.6 * h))
    ripple = 5.0 * np.sin(2 * math.pi * xx[band_top:] / 16.0 + 0.7 * t)
    luma = base
    luma[band_top:] = BAND_LUMA[label] + ripple

    a, b = SITE_TINTS[site_index % len(SITE_TINTS)]
    g = -(0.299 * a + 0.114 * b) / 0.587
    rgb = np.stack([luma + a, luma + g, luma + b], axis=2)
    rgb = rgb + rng.normal(0.0, _NOISE_STD, size=rgb.shape)
    return np.clip(np.floor(rgb + 0.5), 0.0, 255.0).astype(np.uint8)


def _apply_defect(
    pixels: np.ndarray, defect: str, rng: np.random.Generator
) -> np.ndarray:
    h, w = pixels.shape[:2]
    if defect == "underexposed":
        out = rng.normal(2.0, 1.0, size=pixels.shape)
    elif defect == "overexposed":
        out = rng.normal(253.0, 1.0, size=pixels.shape)
    elif defect == "grayscale":
        px = pixels.astype(np.float64)
        y = 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]
        out = np.repeat(np.floor(y + 0.5)[:, :, np.newaxis], 3, axis=2)
    elif defect == "blurred":
        out = pixels.astype(np.float64)
        for _ in range(2):
            out = ndimage.uniform_filter(out, size=(9, 9, 1), mode="reflect")
    elif defect == "flared":
        out = pixels.astype(np.float64)
        bh = h // 3
        bw = int(math.ceil(0.10 * h * w / bh))
        out[4 : 4 + bh, 8 : 8 + bw, :] = 255.0
    else:
        # triggered and bad_timestamp keep clean pixels; the defect lives
        # in the timestamp.
        out = pixels.astype(np.float64)
    return np.clip(np.floor(out + 0.5), 0.0, 255.0).astype(np.uint8)


def generate_corpus(root_dir, spec: CorpusSpec | None = None) -> dict:
    """Write the corpus under root_dir and return its truth table.

    Layout: flat PNGs named {site}_{YYYYMMDD}-{HHMMSS}.png, a labels.csv
    (id,label), and truth.json recording per-frame labels and which frames
    carry which defect. Every defect_period-th frame of each site is
    replaced by one defect, cycling through the seven types with a per-site
    offset. Schedule defects shift the timestamp instead of the pixels:
    "triggered" fires 37 minutes late, "bad_timestamp" is stamped 1999.
    """
    spec = spec or CorpusSpec()
    root = Path(root_dir)
    root.mkdir(parents=True, exist_ok=True)

    labels: dict[str, int] = {}
    defects: dict[str, str] = {}
    clean: list[str] = []
    for s in range(spec.sites):
        site = SITE_NAMES[s]
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, s]))
        site_labels = _site_labels(s, spec.frames_per_site)
        defect_ordinal = 0
        for t in range(spec.frames_per_site):
            label = site_labels[t]
            ts = _START + timedelta(hours=t)
            pixels = _clean_frame(spec, s, t, label, rng)
            defect = None
            if t % spec.defect_period == spec.defect_period // 2:
                defect = DEFECT_TYPES[(defect_ordinal + s) % len(DEFECT_TYPES)]
                defect_ordinal += 1
                pixels = _apply_defect(pixels, defect, rng)
                if defect == "triggered":
                    ts = ts.replace(minute=37)
                elif defect == "bad_timestamp":
                    ts = datetime(1999, 6, 1, t % 24, 0, tzinfo=timezone.utc)
            name = f"{site}_{ts.strftime('%Y%m%d-%H%M%S')}.png"
            save_png(Image(pixels), root / name)
            labels[name] = label
            if defect is None:
                clean.append(name)
            else:
                defects[name] = defect

    with open(root / "labels.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"])
        for name in sorted(labels):
            writer.writerow([name, labels[name]])

    truth = {
        "sites": [SITE_NAMES[s] for s in range(spec.sites)],
        "labels": {k: labels[k] for k in sorted(labels)},
        "defects": {k: defects[k] for k in sorted(defects)},
        "clean": sorted(clean),
    }
    with open(root / "truth.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(truth, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return truth


def _main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(
        prog="python -m streamgate.synthetic",
        description="Generate a synthetic labeled river camera corpus.",
    )
    parser.add_argument("output", help="directory to write the corpus into")
    parser.add_argument("--small", action="store_true", help="3 sites x 36 frames")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    spec = small_corpus_spec(args.seed) if args.small else CorpusSpec(seed=args.seed)
    truth = generate_corpus(args.output, spec)
    print(
        f"{args.output}: {len(truth['labels'])} frames, "
        f"{len(truth['defects'])} defective, {len(truth['sites'])} sites"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(_main())
