"""Shared builders for the test suite: tiny frames, hand-built records,
and a session-scoped synthetic corpus."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import pytest

from streamgate.catalog import Catalog, Image, ImageRecord, save_png

T0 = datetime(2024, 6, 1, 8, 0, 0, tzinfo=timezone.utc)


def solid(value, h=8, w=8):
    """Uniform RGB frame. value is a scalar or an (r, g, b) triple."""
    arr = np.zeros((h, w, 3), dtype=np.uint8)
    arr[:] = value
    return Image(arr)


def record(rid, site="alder", hours=0.0, path="unused.png", label=None,
           stage="raw", parent=None):
    return ImageRecord(
        id=rid,
        site_id=site,
        captured_at=T0 + timedelta(hours=hours),
        path=str(path),
        label=label,
        stage=stage,
        parent_id=parent,
    )


def labeled_catalog(site_labels):
    """Catalog from {site: [label, ...]}; one record per label, hourly."""
    recs = []
    for site, labels in site_labels.items():
        for k, lab in enumerate(labels):
            recs.append(record(f"{site}/{k:03d}.png", site=site, hours=k, label=lab))
    return Catalog.from_records(recs)


def disk_catalog(root, site_frames):
    """Write {site: [(rid_stem, pixels_or_value), ...]} as PNGs and build a
    catalog whose record paths point at them."""
    root = Path(root)
    recs = []
    for site, frames in site_frames.items():
        for k, (stem, value) in enumerate(frames):
            img = value if isinstance(value, Image) else solid(value)
            path = root / site / f"{stem}.png"
            save_png(img, path)
            recs.append(record(f"{site}/{stem}.png", site=site, hours=k, path=path))
    return Catalog.from_records(recs)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """3-site, 36-frame synthetic corpus with injected defects."""
    from streamgate.synthetic import generate_corpus, small_corpus_spec

    root = tmp_path_factory.mktemp("corpus_small")
    truth = generate_corpus(root, small_corpus_spec())
    return root, truth
