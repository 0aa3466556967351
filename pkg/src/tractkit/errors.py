"""Exception types shared across the package."""


class TractkitError(Exception):
    """Base class for all package-specific errors."""


class FormatError(TractkitError):
    """A file does not conform to its expected on-disk format."""


class UnsupportedDatatypeError(FormatError):
    """A volume uses a datatype this package does not handle."""


class ProtocolError(TractkitError):
    """A diffusion protocol is inconsistent or too degenerate to fit."""


class DegenerateTensorError(TractkitError):
    """A tensor is not positive definite even after regularization."""


class SeedingError(TractkitError):
    """No valid seed location exists (empty gray/white interface)."""


class TrackingError(TractkitError):
    """Tracking could not produce the requested streamline count."""
