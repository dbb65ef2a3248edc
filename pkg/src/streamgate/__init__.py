"""streamgate: batch curation and desk-scale classification of time-lapse
river camera imagery.

Pipeline stages: ingest -> quality gate -> temporal luma enhancement ->
site-holdout partitioning -> augmentation/balancing -> patch-attention
classifier -> evaluation. Every stage reads and writes plain manifests and
is deterministic for a fixed seed.
"""

__version__ = "0.1.0"

from streamgate.catalog import (
    Catalog,
    Image,
    ImageRecord,
    IngestIssue,
    NamingRule,
    QualityFlags,
    ingest,
)

__all__ = [
    "Catalog",
    "Image",
    "ImageRecord",
    "IngestIssue",
    "NamingRule",
    "QualityFlags",
    "ingest",
    "__version__",
]
