"""agitrack: multimodal agitation detection for dementia care.

Wristband biosignal features + skeletal-pose video features, from-scratch
tree-ensemble and recurrent classifiers, a streaming detection engine with
context buffers, and a review/retrain service.
"""

from .core import (
    Channel,
    LabelClass,
    LabelInterval,
    LabelSource,
    SampleSeries,
    SessionMeta,
    Timestamp,
    ValidationError,
    WindowLabel,
    label_windows,
    merge_intervals,
)
from .ingest import (
    BiomarkerRecord,
    KeypointFrame,
    Session,
    load_session,
    resample_hold,
    write_session,
)

__version__ = "0.1.0"

__all__ = [
    "Channel",
    "LabelClass",
    "LabelInterval",
    "LabelSource",
    "SampleSeries",
    "SessionMeta",
    "Timestamp",
    "ValidationError",
    "WindowLabel",
    "label_windows",
    "merge_intervals",
    "BiomarkerRecord",
    "KeypointFrame",
    "Session",
    "load_session",
    "resample_hold",
    "write_session",
    "__version__",
]
