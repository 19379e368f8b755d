"""Per-image document dewarping: backward-map optimization with margin and
text-consistency regularizers, a synthetic warp generator, and an
evaluation-metrics suite."""

__version__ = "0.1.0"
