"""Shared exception types."""


class NumericalError(RuntimeError):
    """A sampler or training step produced a non-finite value.

    Carries the diffusion step ``t`` at which the failure surfaced and,
    for training, the index of the offending batch item.
    """

    def __init__(self, message, t=None, batch_index=None):
        super().__init__(message)
        self.t = t
        self.batch_index = batch_index
