"""Exception hierarchy shared by every pipeline stage."""
from typing import Optional


class MaskSplatError(Exception):
    """Base class for all errors raised by this package"""


class ValidationError(MaskSplatError, ValueError):
    """Bad input: wrong shape, out-of-range parameter, missing file"""


class SceneFormatError(ValidationError):
    """A file on disk could not be parsed"""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class PipelineError(MaskSplatError, RuntimeError):
    """A stage failed at runtime"""

    stage = "pipeline"

    def __init__(self, message: str, stage: Optional[str] = None):
        if stage is not None:
            self.stage = stage
        super().__init__(message)


class DegenerateGeometryError(PipelineError):
    stage = "geometry"


class EstimationError(PipelineError):
    """Robust estimation ran out of support"""

    stage = "verify"

    def __init__(self, message: str, count: int):
        self.count = count
        super().__init__(f"{message} (count={count})")


class ReconstructionError(PipelineError):
    stage = "sfm"


class TrainingDivergedError(PipelineError):
    stage = "train"

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)
