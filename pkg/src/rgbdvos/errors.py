"""Exception hierarchy used across the package."""


class RGBDVOSError(Exception):
    """Base class for all package errors."""


class ShapeError(RGBDVOSError, ValueError):
    pass


class IngestError(RGBDVOSError):
    def __init__(self, frame_index, message=None):
        self.frame_index = frame_index
        super().__init__(message or f"missing rgb/depth pair for frame {frame_index}")


class AnnotationError(RGBDVOSError):
    pass


class EmptyMaskError(RGBDVOSError, ValueError):
    pass


class EmptyMemoryError(RGBDVOSError):
    pass


class EmptyHistoryError(RGBDVOSError):
    pass


class EmptyRegionError(RGBDVOSError, ValueError):
    pass


class CropError(RGBDVOSError, ValueError):
    pass


class RefinerError(RGBDVOSError):
    pass


class TrainingDivergedError(RGBDVOSError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"loss became non-finite at step {step}")


class EvalError(RGBDVOSError):
    def __init__(self, frame_index, message=None):
        self.frame_index = frame_index
        super().__init__(message or f"no prediction for annotated frame {frame_index}")


class ConfigError(RGBDVOSError, ValueError):
    pass
