"""Exception taxonomy shared across the package.

Configuration problems and numerical failures map to different process
exit codes in the command-line tools, so they stay distinct types.
"""


class ConfigurationError(ValueError):
    """Scenario or grid setup that can never run (bad extent, missing keys)."""


class OutOfDomainError(RuntimeError):
    """A particle left the background grid; the step cannot continue."""


class NumericalFailure(RuntimeError):
    """An iterative solve diverged or produced non-finite values."""
