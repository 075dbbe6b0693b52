"""Exception hierarchy.

Each class maps onto one CLI exit code so scripts can tell failures apart.
"""


class QcltError(Exception):
    exit_code = 1


class InternalError(QcltError):
    """A numerical self-check failed; indicates a bug, not bad input."""

    exit_code = 1


class AssumptionViolation(QcltError):
    """The sampled Markov chain is reducible or periodic."""

    exit_code = 2

    def __init__(self, message, violating_class=None):
        super().__init__(message)
        self.violating_class = violating_class


class ConfigError(QcltError, ValueError):
    """Invalid configuration or fixture file.

    ``field`` holds the dotted path of the offending field and ``line`` the
    1-based source line when known.
    """

    exit_code = 3

    def __init__(self, message, field=None, line=None):
        loc = []
        if field is not None:
            loc.append(f"field '{field}'")
        if line is not None:
            loc.append(f"line {line}")
        full = f"{message} ({', '.join(loc)})" if loc else message
        super().__init__(full)
        self.field = field
        self.line = line


class SandwichViolation(InternalError):
    """Delta_down <= Delta <= Delta_up failed during a tracked run."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class MixingCapExceeded(QcltError):
    exit_code = 1

    def __init__(self, message, tv_at_cap):
        super().__init__(message)
        self.tv_at_cap = tv_at_cap
