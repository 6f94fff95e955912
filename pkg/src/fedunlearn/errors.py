"""Exception hierarchy shared by every module."""


class FedUnlearnError(Exception):
    """Base class for all errors raised by the simulator."""


class ConfigError(FedUnlearnError, ValueError):
    """Invalid shapes, lengths or hyperparameters."""


class NumericalError(FedUnlearnError, FloatingPointError):
    """A loss or gradient became non-finite (step size too large)."""


class PartitionError(FedUnlearnError):
    """Dirichlet partition could not give every client a sample."""


class ScenarioError(FedUnlearnError):
    """The simulated scenario did not reach a required precondition."""


class EvaluationError(FedUnlearnError):
    """Metric requested on an empty or malformed evaluation set."""
