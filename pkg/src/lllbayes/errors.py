"""Exception hierarchy shared by all modules."""


class LLLError(Exception):
    """Base class for library errors."""


class InvalidParameter(LLLError, ValueError):
    """A distribution parameter is outside its admissible set."""


class InvalidInput(LLLError, ValueError):
    """Input data (e.g. a measurement batch) does not meet a precondition."""


class PosteriorImproper(LLLError):
    """An update left the natural-parameter space."""


class MeanUndefined(LLLError):
    """The requested moment does not exist for these parameters."""


class NumericalFailure(LLLError):
    """A matrix was numerically singular or a computation produced non-finite values."""


class DegenerateWeights(LLLError):
    """All importance weights underflowed."""
