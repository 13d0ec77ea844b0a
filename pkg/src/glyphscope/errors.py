"""Exception hierarchy shared by all engines.

Every error raised deliberately by the package derives from ``GlyphError`` so
the CLI can map error classes onto exit codes in one place.
"""


class GlyphError(Exception):
    """Base class for package errors."""

    #: short machine-readable reason used in CLI reports
    reason = "error"


class InputError(GlyphError, ValueError):
    """Malformed or unusable input data (CLI exit 3)."""

    reason = "invalid_input"


class DetectionError(GlyphError):
    """An algorithm ran but could not produce an answer (CLI exit 4)."""

    reason = "detection_failed"


# tensor core
class ShapeMismatch(InputError):
    reason = "shape_mismatch"


class NonFiniteInput(InputError):
    reason = "non_finite_input"


# style network
class EmptyImage(InputError):
    reason = "empty_image"


class ModelNotLoaded(GlyphError):
    reason = "model_not_loaded"


class EmptyDataset(InputError):
    reason = "empty_dataset"


class SingleClassDataset(InputError):
    reason = "single_class_dataset"


class WeightFileError(InputError):
    reason = "bad_weight_file"


class FormatVersionMismatch(WeightFileError):
    reason = "format_version_mismatch"


class ChecksumMismatch(WeightFileError):
    reason = "checksum_mismatch"


class TrainingDiverged(DetectionError):
    reason = "training_diverged"


# color / size
class EmptyPixelSet(InputError):
    reason = "empty_pixel_set"


class NoEdges(DetectionError):
    reason = "no_edges"


class ImageTooSmall(InputError):
    reason = "image_too_small"


# prediction
class MissingEmbedding(InputError):
    reason = "missing_embedding"


class KTooLarge(DetectionError):
    reason = "k_too_large"


class TooFewNeighbors(InputError):
    reason = "too_few_neighbors"


class DimensionMismatch(InputError):
    reason = "dimension_mismatch"


class UnknownFont(DetectionError):
    reason = "unknown_font"


class DatasetParseError(InputError):
    """CSV parse failure; ``line`` is 1-based and counts the header."""

    reason = "parse_error"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# fixtures
class InvalidSpec(InputError):
    reason = "invalid_spec"


class InvalidParams(InputError):
    reason = "invalid_params"
