"""Exception hierarchy shared by all dipex modules."""


class DipexError(Exception):
    """Base class for every error raised by dipex."""


class GeometryError(DipexError, ValueError):
    """Invalid scan geometry (radius, axes, duplicate points...)."""


class SchemaError(DipexError, ValueError):
    """A dataset or JSON file does not match its schema."""


class SingularityError(DipexError, ValueError):
    """Observation point coincides with a source (or its image)."""


class IllConditionedError(DipexError, ArithmeticError):
    """Least-squares system is numerically rank deficient."""

    def __init__(self, cond, rcond):
        self.cond = float(cond)
        self.rcond = float(rcond)
        super().__init__(
            f"transfer matrix is ill-conditioned: cond={self.cond:.3e} > 1/rcond={1.0 / self.rcond:.3e}"
        )


class MetricError(DipexError, ValueError):
    """Relative error undefined (measured field identically zero)."""


class ConfigError(DipexError, ValueError):
    """Invalid solver / GA / extraction configuration."""
