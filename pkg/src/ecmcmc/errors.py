class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class NonFiniteError(FloatingPointError):
    """A sampler produced or received a non-finite value."""

    def __init__(self, message, step=None, worker=None):
        super().__init__(message)
        self.step = step
        self.worker = worker
