"""Exception taxonomy.

Four families, matching the CLI exit codes: config (2), input data (3),
provider/protocol (4), numeric failure (5).
"""

from __future__ import annotations


class CcdError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(CcdError):
    """Invalid configuration document or out-of-range parameter."""

    exit_code = 2


class DataError(CcdError):
    """Invalid input data: tensors, manifests, label artifacts."""

    exit_code = 3


class TensorFormatError(DataError):
    """Malformed tensor container file."""


class BadMagicError(TensorFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(TensorFormatError):
    """Container version not supported by this reader."""


class UnsupportedDtypeError(TensorFormatError):
    """Element type tag not supported by this reader."""


class TruncatedTensorError(TensorFormatError):
    """Payload shorter than the header declares."""


class ManifestError(DataError):
    """Dataset manifest failed validation."""


class ArtifactMismatchError(DataError):
    """Stage artifact was produced under a different config hash."""


class NoAdmittedSamplesError(DataError):
    """Entropy filter admitted zero samples; raise the threshold."""


class ProviderError(CcdError):
    """Failure talking to the view-embedding provider."""

    exit_code = 4


class ProtocolError(ProviderError):
    """Malformed or out-of-contract message on the wire."""


class ProviderResponseError(ProviderError):
    """Provider answered a request with an error object."""

    def __init__(self, code: str, message: str, image_id: str | None = None):
        self.code = code
        self.image_id = image_id
        detail = f"provider error [{code}]: {message}"
        if image_id is not None:
            detail += f" (image {image_id})"
        super().__init__(detail)


class ProviderTimeoutError(ProviderError):
    """Provider did not answer within the configured timeout."""


class EmbeddingValidationError(ProviderError):
    """Provider returned an embedding with the wrong dimension or non-finite values."""


class NumericError(CcdError):
    """Non-finite value encountered where finite math was required."""

    exit_code = 5
