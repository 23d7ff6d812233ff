"""Exception types shared across the package."""


class CZVarError(Exception):
    """Base class for all errors raised by czvar."""


class InvalidArgument(CZVarError, ValueError):
    pass


class DomainError(CZVarError, ValueError):
    pass


class SingularityError(CZVarError, ValueError):
    pass


class TruncationTooFine(CZVarError, ValueError):
    """A truncation radius is below the floor of two cell diameters."""


class InvalidWeight(CZVarError, ValueError):
    """A matrix weight is not positive definite on some cell."""


class RankDeficiency(CZVarError, ValueError):
    pass
