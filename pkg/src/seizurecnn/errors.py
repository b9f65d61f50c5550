"""Exception hierarchy shared across the toolkit.

Command-line entry points map these onto exit codes: configuration
problems exit 2, data problems exit 3.
"""


class SeizureCnnError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SeizureCnnError):
    """Invalid or inconsistent run configuration."""


class DataError(SeizureCnnError):
    """Problem with input data: files, manifests, layouts, or labels."""


class ClipFormatError(DataError):
    """Clip file violates the binary format contract."""


class BadMagicError(ClipFormatError):
    """File does not start with the clip magic bytes."""


class UnsupportedVersionError(ClipFormatError):
    """Clip format version not handled by this build."""


class PayloadLengthError(ClipFormatError):
    """Sample payload length inconsistent with the header."""


class ManifestError(DataError):
    """Malformed or self-inconsistent data manifest."""


class LayoutError(DataError):
    """Electrode layout missing, invalid, or unsuitable for a topology."""


class UnknownSubjectError(DataError):
    """Requested subject does not appear in the manifest."""


class DegenerateTrainingSetError(DataError):
    """Training set lacks one of the two classes."""


class SingleClassError(DataError):
    """Score set contains only one label; ROC/AUC is undefined."""


class TrainingDivergedError(SeizureCnnError):
    """Loss became non-finite during optimization."""
