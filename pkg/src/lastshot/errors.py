"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class ConfigError(ValueError):
    pass


class EpisodeError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
