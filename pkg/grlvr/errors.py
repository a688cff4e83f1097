class GrlvrError(Exception):
    """Base class of every error raised by the library."""


class InputError(GrlvrError, ValueError):
    pass


class NumericError(GrlvrError, ArithmeticError):
    def __init__(self, message: str, layer: str | None = None):
        super().__init__(f"{message} (layer {layer})" if layer else message)
        self.layer = layer


class DegenerateConstantError(GrlvrError, ArithmeticError):
    pass


class ConfigError(GrlvrError, ValueError):
    pass


class CheckpointError(GrlvrError, IOError):
    pass
