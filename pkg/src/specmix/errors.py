"""Exception hierarchy shared across the package."""


class SpecmixError(Exception):
    """Base class for all package errors."""


class ShapeError(SpecmixError, ValueError):
    pass


class ParameterError(SpecmixError, ValueError):
    pass


class ConfigError(SpecmixError, ValueError):
    pass


class ContractError(SpecmixError, ValueError):
    """An input violated an operation's documented precondition."""


class BatchError(ContractError):
    pass


class NonFiniteError(SpecmixError, FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


class UnsupportedOpError(SpecmixError, NotImplementedError):
    """Second-order differentiation was requested through ops lacking a rule."""

    def __init__(self, ops):
        self.ops = sorted(set(ops))
        super().__init__(
            "double backward is not supported through op(s): " + ", ".join(self.ops)
        )


class FormatError(SpecmixError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(SpecmixError, RuntimeError):
    def __init__(self, iteration, checkpoint=None):
        msg = f"training diverged at iteration {iteration}"
        if checkpoint is not None:
            msg += f"; last checkpoint: {checkpoint}"
        super().__init__(msg)
        self.iteration = iteration
        self.checkpoint = checkpoint
