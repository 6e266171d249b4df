class ExportError(Exception):
    """Base class for everything this package raises on purpose."""


class FormatError(ExportError):
    """A tensor file violates the FT32 format."""


class LayoutError(ExportError):
    """A dataset directory does not follow the expected layout."""
