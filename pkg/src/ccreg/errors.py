"""Exception types shared across the engine."""


class VolumeFormatError(ValueError):
    """Malformed volume header/payload or unsupported dtype."""


class ContractError(ValueError):
    """A caller violated an operation precondition (shape/length mismatch)."""


class DomainError(ValueError):
    """Input data outside the valid domain (empty mask, bad landmark row)."""


class PhantomParameterError(ValueError):
    """Requested synthetic deformation is not invertible on the grid."""


class NumericalAbort(RuntimeError):
    """Optimization produced a non-finite loss or gradient; carries context."""

    def __init__(self, message, epoch=None, breakdown=None):
        super().__init__(message)
        self.epoch = epoch
        self.breakdown = breakdown
