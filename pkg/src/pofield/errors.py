"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when vector or operator dimensions do not line up."""


class DensificationError(ValueError):
    """Raised when densifying an operator would exceed the entry cap."""


class SolverError(RuntimeError):
    """Conjugate gradient failed (non-finite values or breakdown).

    Attributes:
        iterations: number of completed iterations when the failure occurred.
        perturbation: the perturbed data vectors, attached by the PO sampler
            so a failing draw can be diagnosed.
    """

    def __init__(self, message, iterations=0, perturbation=None):
        super().__init__(message)
        self.iterations = iterations
        self.perturbation = perturbation


class IndefiniteError(SolverError):
    """Curvature p'Qp went negative beyond tolerance."""


class DegenerateConditionalError(ValueError):
    """A Gamma conditional has a zero residual and is improper."""
