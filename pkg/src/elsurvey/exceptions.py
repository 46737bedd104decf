"""Exception hierarchy.

Data problems derive from :class:`DataError`, numerical failures from
:class:`NumericalError`; the CLI maps the two families to different exit codes.
"""


class ELSurveyError(Exception):
    """Base class for all package errors."""


class DataError(ELSurveyError):
    """Input data violates a contract (schema, parse or validation)."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class NumericalError(ELSurveyError):
    """A numerical routine could not deliver a result."""


class HullViolation(NumericalError):
    """Zero is not inside the convex hull of the constraint rows."""


class NoConvergence(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class SingularComponent(NumericalError):
    pass


class SingularGram(NumericalError):
    pass


class CertaintyUnit(ValidationError):
    """A unit would have inclusion probability of one or more."""


class EmptyRespondents(ValidationError):
    pass


class UnstableQuantile(NumericalError):
    """Too few finite bootstrap statistics to read off a quantile."""


class DegenerateTest(NumericalError):
    """A test statistic has zero standard error."""
