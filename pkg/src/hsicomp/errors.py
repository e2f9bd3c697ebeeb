"""Exception hierarchy.

Every error carries a short ``category`` used by the CLI to print a
machine-parseable one-line failure.
"""


class HsiError(Exception):
    category = "error"


class DimensionError(HsiError, ValueError):
    category = "dimension"


class LayoutError(HsiError, ValueError):
    category = "layout"


class FormatError(HsiError, ValueError):
    """Malformed file contents. ``location`` names the file, layer or byte offset."""

    category = "format"

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)


class CalibrationError(HsiError, ValueError):
    category = "calibration"


class LabelError(HsiError, ValueError):
    category = "label"


class StructureError(HsiError, ValueError):
    category = "structure"


class SchemeError(HsiError, ValueError):
    category = "scheme"


class InfeasibleError(HsiError):
    category = "infeasible"

    def __init__(self, message, max_achievable=None):
        self.max_achievable = max_achievable
        super().__init__(message)


class IterationError(HsiError):
    category = "iteration"

    def __init__(self, message, attempts=()):
        self.attempts = list(attempts)
        super().__init__(message)


class TrainingError(HsiError):
    category = "training"


class QuantizationError(HsiError, ValueError):
    category = "quantization"


class PipelineError(HsiError):
    category = "pipeline"

    def __init__(self, message, frame_index=None, step=None):
        self.frame_index = frame_index
        self.step = step
        if frame_index is not None:
            message = f"frame {frame_index}, step {step!r}: {message}"
        super().__init__(message)


class ConfigError(HsiError, ValueError):
    category = "config"
