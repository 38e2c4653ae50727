"""Exception types shared across the package."""


class LemonadeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LemonadeError, ValueError):
    """A layer received inputs whose dimensions do not fit its definition."""

    def __init__(self, layer, message, dims=None):
        self.layer = layer
        self.dims = dims
        text = f"layer {layer}: {message}"
        if dims is not None:
            text += f" (dims: {dims})"
        super().__init__(text)


class NonFiniteError(LemonadeError, FloatingPointError):
    def __init__(self, layer, where="activation"):
        self.layer = layer
        super().__init__(f"non-finite {where} at layer {layer}")


class MissingWeightsError(LemonadeError, KeyError):
    def __init__(self, layer, name=None):
        self.layer = layer
        what = f"parameter {name!r}" if name else "weights"
        super().__init__(f"missing {what} for layer {layer}")


class TapeError(LemonadeError, RuntimeError):
    """Backward pass requested without a matching cached forward pass."""


class GraphError(LemonadeError, ValueError):
    pass


class ParseError(LemonadeError, ValueError):
    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)


class MorphError(LemonadeError, ValueError):
    """A mutation operator cannot be applied at the requested site.

    ``code`` is a short machine-readable reason such as ``"constraint"``,
    ``"precondition"``, ``"shape"``, ``"cycle"`` or ``"exhausted"``.
    """

    def __init__(self, code, message):
        self.code = code
        super().__init__(f"{code}: {message}")


class TrainingError(LemonadeError, FloatingPointError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step}")


class ConfigError(LemonadeError, ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


class CheckpointError(LemonadeError, ValueError):
    pass


class IdxFormatError(LemonadeError, ValueError):
    """``kind`` is one of ``"bad magic"``, ``"truncated"``, ``"count mismatch"``."""

    def __init__(self, kind, message):
        self.kind = kind
        super().__init__(f"{kind}: {message}")
