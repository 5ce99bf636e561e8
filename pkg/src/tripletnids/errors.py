"""Exception types. The CLI maps each family onto its own exit code."""


class ConfigError(ValueError):
    """Bad experiment config or command-line usage."""


class DataError(ValueError):
    """Unreadable dataset or a class structure that cannot satisfy a request."""


class NumericError(ArithmeticError):
    """Training produced non-finite parameters, losses or embeddings."""


class NoValidTriplets(ValueError):
    """A batch admits no (anchor, positive, negative) combination."""
