"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration / validation problems
exit with 2, numerical failures with 1.
"""


class HicoError(Exception):
    """Base class for all library errors."""


class ArgumentError(HicoError):
    """An argument violates a documented precondition (bad shape, range, mode)."""


class ContractError(HicoError):
    """An operation was invoked on an object in the wrong state or mode."""


class NumericalError(HicoError):
    """A numerical routine failed (non-convergence, non-finite values)."""


class FormatError(HicoError):
    """A file or payload does not match its documented schema."""


class MissingKeyError(HicoError):
    """A lookup failed and no fallback was configured."""


class ConfigError(HicoError):
    """A run configuration is inconsistent or incomplete."""


class DegenerateGraphError(HicoError):
    """An affinity graph has an isolated point; spectral clustering is undefined."""


class MetricError(HicoError):
    """A metric is mathematically undefined for the given inputs."""
