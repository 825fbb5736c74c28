"""Exception types shared across the package."""


class CodecastError(Exception):
    """Base class for package-specific errors."""


class ConfigurationError(CodecastError):
    """Invalid configuration value or malformed config file."""


class DataFormatError(CodecastError):
    """Unparseable or schema-violating input data; message names the location."""


class CohortValidationError(CodecastError):
    """Structurally valid data that violates a cohort constraint."""


class EmptyInputError(CodecastError):
    """An input that must be nonempty was empty."""


class DegenerateSliceError(CodecastError):
    """An admission produced no propositions and no codes."""


class TrajectoryError(CodecastError):
    """A patient trajectory had no usable slices."""


class CalibrationError(CodecastError):
    """Conformal calibration was given no usable instances."""


class MetricError(CodecastError):
    """A metric is undefined on the given inputs."""
