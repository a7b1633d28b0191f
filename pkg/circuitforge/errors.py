class CircuitForgeError(Exception):
    """Base class for all errors raised by circuitforge."""


class IdxFormatError(CircuitForgeError, ValueError):
    pass


class ConsistencyError(CircuitForgeError, ValueError):
    pass


class EmptyDatasetError(CircuitForgeError, ValueError):
    pass


class EmptyPoolError(CircuitForgeError, ValueError):
    pass


class TruncatedFileError(CircuitForgeError, OSError):
    pass


class ModelFormatError(CircuitForgeError, ValueError):
    pass


class ConfigurationError(CircuitForgeError, ValueError):
    pass


class NumericError(CircuitForgeError, ArithmeticError):
    """Non-finite values in a forward pass, loss or gradient. step is set when raised during training."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class TrainingDiverged(NumericError):
    """Raised by train when the loss stops being finite; carries the partial TrainReport."""

    def __init__(self, message, step, report):
        super().__init__(message, step)
        self.report = report
