"""Exception hierarchy shared by every dpseg module."""


class DPSegError(Exception):
    """Base class for all dpseg errors."""


class InvalidConfigError(DPSegError, ValueError):
    pass


class DimensionError(DPSegError, ValueError):
    pass


class DegenerateVectorError(DPSegError, ValueError):
    """A vector that must be normalized has (near) zero norm."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class MalformedTemplateError(DPSegError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class EmptyBankError(DPSegError, ValueError):
    pass


class ContainerFormatError(DPSegError):
    """File is not a DPEC1 container."""


class ContainerCorruptionError(DPSegError):
    """Manifest and payload disagree."""


class InvalidLabelError(DPSegError, ValueError):
    pass


class InvalidInputError(DPSegError, ValueError):
    pass


class DivergenceError(DPSegError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InternalConsistencyError(DPSegError, RuntimeError):
    pass


class GenerationError(DPSegError, RuntimeError):
    pass
