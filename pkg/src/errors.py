"""
Exception hierarchy for cktgrid.

Every error carries a stable ``code`` so the CLI can print a single
machine-parsable line. Simulation non-convergence is not an error; it is
reported on the result object instead.
"""


class CktError(Exception):
    """Base class for all cktgrid errors."""

    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        """Render as ``<code>: <message>`` with newlines folded."""
        text = " ".join(self.message.split())
        return f"{self.code}: {text}"


class StructuralError(CktError):
    """Node/edge lists that reference missing or duplicate ids."""

    code = "structural"


class CycleError(CktError):
    code = "cycle"


class ConversionError(CktError):
    """No consistent stage assignment, or a malformed StageGraph."""

    code = "conversion"


class DecompositionError(CktError):
    code = "decomposition"


class UnknownEntryError(CktError):
    code = "unknown-entry"


class SimulationError(CktError):
    code = "simulation"


class SamplingError(CktError):
    code = "sampling"


class DatasetFormatError(CktError):
    code = "dataset-format"


class ShapeError(CktError):
    code = "shape"


class CheckpointError(CktError):
    code = "checkpoint"


class TrainingDivergedError(CktError):
    code = "diverged"


class ConfigError(CktError):
    code = "config"
