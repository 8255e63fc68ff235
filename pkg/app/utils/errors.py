"""Exception hierarchy shared by the library, the CLI and the HTTP routes."""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_FAILURE = 3


class BevRegError(Exception):
    """Base error. Subclasses pick the CLI exit code and the HTTP status."""
    exit_code = EXIT_FAILURE
    status_code = 422

    def to_dict(self):
        """Convert the error to a JSON-ready dictionary."""
        return {
            'error': type(self).__name__,
            'message': str(self)
        }


class ConfigError(BevRegError):
    """Invalid or unknown configuration keys."""
    exit_code = EXIT_USAGE
    status_code = 400


class FormatError(BevRegError):
    """Malformed file contents (.bin length, pose lines, manifest lines)."""
    exit_code = EXIT_DATA
    status_code = 400


class InputOutputError(BevRegError):
    """A file could not be read or written."""
    exit_code = EXIT_DATA
    status_code = 500

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


class EmptyInputError(BevRegError):
    """An operation that needs points, keypoints or pairs received none."""
    exit_code = EXIT_DATA
    status_code = 400


class ExtentError(BevRegError):
    """Sensor poses could not be placed inside the scene extent."""
    exit_code = EXIT_DATA
    status_code = 400


class ShapeError(BevRegError):
    """Channel, dimension or active-set mismatch."""


class DegenerateFeatureError(BevRegError):
    """A feature vector is too close to zero (or has a non-positive max) to normalize."""


class EmptyContextError(BevRegError):
    """Attention or overlap scoring was given an empty token set."""


class TapeError(BevRegError):
    """backward() was called on a value that has no recorded forward pass."""


class NumericError(BevRegError):
    """A loss term became non-finite."""

    def __init__(self, term, value, step=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"loss term '{term}' is not finite ({value}){where}")
        self.term = term
        self.value = value
        self.step = step


class SamplingContractError(BevRegError):
    """A correspondence sample is missing positives or negatives."""


class NoOverlapError(BevRegError):
    """No anchor has a positive correspondence; the pair is skipped."""


class ConsistencyError(BevRegError):
    """Internal invariants between grids and feature maps do not hold."""


class DegenerateConfigurationError(BevRegError):
    """Point pairs are collinear or otherwise rank deficient."""


class InsufficientDataError(BevRegError):
    """Fewer correspondences than the minimal sample size."""


class CheckpointError(BevRegError):
    """Checkpoint file is corrupt or was written for another configuration."""
    exit_code = EXIT_DATA
    status_code = 500


class VerificationError(BevRegError):
    """One or more verification suites failed."""
