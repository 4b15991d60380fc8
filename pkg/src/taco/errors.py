"""Exception hierarchy for the taco codec.

Every failure mode that callers are expected to handle gets its own class so
that the CLI can map errors onto exit codes without string matching.
"""

from __future__ import annotations


class TacoError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TacoError):
    """A configuration file or option is malformed or inconsistent."""


class ShapeError(TacoError):
    """A tensor argument has the wrong rank, size, or value range."""


class CodingError(TacoError):
    """Entropy coding failed (symbol outside its table, corrupt state, ...)."""


class ContainerError(TacoError):
    """A serialized bitstream is malformed, truncated, or mismatched."""


class ModelMismatchError(ContainerError):
    """The bitstream was produced by different model weights than the decoder's."""


class ProviderUnavailableError(TacoError):
    """A pretrained network (text tower, perceptual metric) could not be loaded."""


class NumericError(TacoError):
    """A loss term or metric became NaN or otherwise left its valid domain."""


class TrainingDivergedError(NumericError):
    """Training produced a non-finite loss term."""


class DatasetError(TacoError):
    """A dataset manifest or one of its entries is unusable."""


class RansUnavailableError(TacoError):
    """The optional native rANS coder library was requested but is not built."""
