"""Exception types shared across the package."""


class ErmError(Exception):
    """Base class for package errors."""


class InvalidArgument(ErmError, ValueError):
    pass


class DegenerateLabels(ErmError, ValueError):
    """Training data holds a single class (or only zeros for count models)."""


class UnresamplableCluster(ErmError, ValueError):
    def __init__(self, cluster: int, message: str | None = None):
        self.cluster = cluster
        super().__init__(message or f"cluster {cluster} has no positive rows to resample")


class ConfigError(ErmError):
    """Scenario or planner configuration is unusable."""
