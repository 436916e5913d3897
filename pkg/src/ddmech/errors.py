"""Exception hierarchy shared across the package."""


class DDMechError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(DDMechError):
    """Invalid or infeasible geometry (bad Jacobian, overlapping holes, ...)."""


class UnderConstrainedError(DDMechError):
    """Boundary conditions leave rigid-body modes (singular operator)."""


class UnsupportedMetricError(DDMechError):
    """Operation requires an isotropic metric but got an anisotropic one."""


class NumericsError(DDMechError):
    """A linear solve or iteration failed numerically."""


class ConfigError(DDMechError):
    """Invalid run configuration (schema violation, missing field, ...)."""
