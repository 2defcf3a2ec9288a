"""Record linkage under uncertainty and small-area estimation on linked data."""

__version__ = "0.1.0"

from .records import (  # noqa: F401
    MISSING,
    KeyFieldSchema,
    LinkErrorReport,
    MatchMatrix,
    RecordFile,
    TruthDeck,
    link_error_rates,
    validate_file,
)
