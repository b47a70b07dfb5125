"""Exception types shared across the package."""


class AnnulusSLEError(Exception):
    """Base class for all package errors."""


class DomainError(AnnulusSLEError, ValueError):
    """An argument lies outside the domain of the operation."""


class PoleError(AnnulusSLEError, ValueError):
    """Evaluation requested too close to a pole of a kernel."""


class IntegratorError(AnnulusSLEError, RuntimeError):
    """The ODE integrator could not make progress."""


class SwallowedError(AnnulusSLEError, RuntimeError):
    """A point was swallowed before the requested time."""


class GeometryError(AnnulusSLEError, ValueError):
    """A lattice domain failed its symmetry or connectivity checks."""


class ConvergenceError(AnnulusSLEError, RuntimeError):
    """An iterative solve did not reach its tolerance."""


class StateError(AnnulusSLEError, RuntimeError):
    """An explorer state is internally inconsistent."""


class StencilCollapseError(AnnulusSLEError, RuntimeError):
    """Stencil nodes of the pair flow became unusable."""


class BoundViolationError(AnnulusSLEError, RuntimeError):
    """A pathwise bound on the restriction martingale was violated."""


class ConvergenceWarning(UserWarning):
    """A truncated series may not meet its tolerance."""
