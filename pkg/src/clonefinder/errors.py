"""Exception types shared across the package."""

from __future__ import annotations


class CloneFinderError(Exception):
    """Base class for all package errors."""


class ExtractionError(CloneFinderError):
    """A single file could not be extracted; recoverable at corpus level."""


class FragmentFormatError(CloneFinderError):
    """Fragment file record is malformed or violates invariants."""


class ProviderError(CloneFinderError):
    """An embedding provider failed to produce vectors."""


class ProviderProtocolError(ProviderError):
    """Provider returned a structurally invalid response."""


class DimensionMismatchError(CloneFinderError):
    """Vectors of differing dimension in one index or provider stream."""


class CorpusMismatchError(CloneFinderError):
    """Operands refer to different fragment universes."""


class GoldStandardError(CloneFinderError):
    """Gold-standard file is malformed or references unknown fragments."""


class StageError(CloneFinderError):
    """A pipeline stage failed."""


class IntegrityError(CloneFinderError):
    """A recorded artifact hash no longer matches the file on disk."""
