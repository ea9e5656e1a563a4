"""Exception and warning types shared across the package."""


class StaginError(Exception):
    """Base class for all package errors."""


# fcgraph
class AllDegenerate(StaginError, ValueError):
    pass


class WindowTooLong(StaginError, ValueError):
    pass


class WindowTooShort(StaginError, ValueError):
    pass


# autodiff / model
class ShapeMismatch(StaginError, ValueError):
    pass


class NotScalar(StaginError, ValueError):
    pass


class IndexOutOfRange(StaginError, IndexError):
    pass


class DegenerateInput(StaginError, ValueError):
    pass


# train
class OutOfRange(StaginError, ValueError):
    pass


class SliceTooLong(StaginError, ValueError):
    pass


class ClassTooSmall(StaginError, ValueError):
    pass


class SingleClass(StaginError, ValueError):
    pass


# analysis
class NotStochastic(StaginError, ValueError):
    pass


class TooFewSamples(StaginError, ValueError):
    pass


class EmptyAttendedSet(StaginError, ValueError):
    pass


class ZeroExpected(StaginError, ValueError):
    pass


class RankDeficientDesign(StaginError, ValueError):
    pass


class TooFewSubjects(StaginError, ValueError):
    pass


# synthdata
class NotSPD(StaginError, ValueError):
    pass


# formats / cli
class FormatError(StaginError, ValueError):
    pass


class ConfigError(StaginError, ValueError):
    """Raised with every violation found, not just the first."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DegenerateWarning(UserWarning):
    """A computation hit a degenerate case and fell back to a defined value."""
