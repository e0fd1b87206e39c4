"""Exception types shared across the package.

Plain argument mistakes (shape mismatches, out-of-range values) raise
ValueError; these classes cover failures that callers may want to handle
separately, and they drive the CLI exit-code mapping.
"""


class EatsegError(Exception):
    """Base class for package-specific failures."""


class ManifestError(EatsegError):
    """Manifest does not parse or violates the schema; message names the field path."""


class MissingAssetError(ManifestError):
    """A file referenced by a manifest entry does not exist."""


class ConfigError(EatsegError):
    """A configuration object is internally inconsistent or violates a contract."""


class CheckpointError(EatsegError):
    """Checkpoint file is corrupt, truncated, or has an unsupported format version."""


class DataLeakError(EatsegError):
    """Train/validation patient sets overlap, or a bias correction is applied to its own fit data."""


class DivergenceError(EatsegError):
    """Training produced a non-finite loss; message names the epoch."""


class UndefinedCorrelationError(EatsegError):
    """Pearson correlation requested on a constant series."""
