"""Offline patch-feature exporter for multi-view datasets.

Turns each sample of a calibrated multi-view dataset into per-view
feature tensors (one file per view and modality) plus a manifest, in the
FT32 interchange layout the detection engine loads directly. The engine
never imports this package; the two meet only on the file format.
"""

from .errors import ExportError, FormatError, LayoutError
from .export import ExportManifest, ExportOptions, export_dataset, export_sample
from .ft32 import read_ft32, write_ft32

__all__ = [
    "ExportError",
    "ExportManifest",
    "ExportOptions",
    "FormatError",
    "LayoutError",
    "export_dataset",
    "export_sample",
    "read_ft32",
    "write_ft32",
]
