"""Exception hierarchy.  ``InputError`` subclasses map to CLI exit code 1,
``RuntimeFailure`` subclasses to exit code 2."""


class XraySplatError(Exception):
    pass


class InputError(XraySplatError, ValueError):
    pass


class RuntimeFailure(XraySplatError, RuntimeError):
    pass


class InvalidSpec(InputError):
    pass


class DegenerateProjection(InputError):
    pass


class BehindSource(InputError):
    pass


class InsufficientPoints(InputError):
    pass


class DegenerateConfiguration(InputError):
    pass


class CalibrationFailed(RuntimeFailure):
    pass


class ShapeMismatch(InputError):
    pass


class InvalidCrop(InputError):
    pass


class CropOutOfBounds(InputError):
    pass


class InvalidReference(InputError):
    pass


class PreconditionError(InputError):
    pass


class TrainingDiverged(RuntimeFailure):
    def __init__(self, message, checkpoint=None, iteration=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.iteration = iteration
