"""Exception hierarchy shared by every uasflow module."""


class UasflowError(Exception):
    """Base class for all uasflow errors."""


class ConfigurationError(UasflowError, ValueError):
    """Invalid geometry, grid, scenario or cluster configuration."""


class DomainError(UasflowError, ValueError):
    """A query was made outside the set where it is defined."""


class SingularityError(DomainError):
    """Evaluation point coincides with a flow element center."""


class NotOnBoundaryError(DomainError):
    """Point lies on neither the outer boundary nor an unplanned boundary."""


class ConnectivityError(ConfigurationError):
    """Planned subgraph does not reach the boundary-control nodes."""


class ClusterValidationError(ConfigurationError):
    """Cluster graph or weights violate the containment requirements."""


class NumericalError(UasflowError, RuntimeError):
    """A numerical routine failed to converge or lost accuracy."""


class StepSizeError(UasflowError, ValueError):
    """Explicit time step exceeds the stability limit."""
