"""Shared exception types for the flexstore engine."""


class FlexStoreError(Exception):
    """Base class for all flexstore errors."""


class OutOfRangeError(FlexStoreError):
    """An offset or range falls outside the addressable space."""


class RemapError(FlexStoreError):
    """A remap target spans multiple extents or an unmapped hole."""


class SpaceExhaustedError(FlexStoreError):
    """No free segment is available and garbage collection cannot help."""


class UnrecoverableStoreError(FlexStoreError):
    """Persistent metadata is corrupt beyond what recovery can repair."""


class CorruptionError(FlexStoreError):
    """On-media data violates a format invariant."""


class StoreClosedError(FlexStoreError):
    """Operation attempted on a closed handle."""
