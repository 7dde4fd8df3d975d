"""Exception hierarchy.

``exit_code`` is what the command line returns when the error escapes a
subcommand: 2 for configuration problems, 3 for bad input data, 4 for
violated internal invariants.
"""


class PscError(Exception):
    exit_code = 3


class ConfigError(PscError):
    exit_code = 2


class InvariantViolation(PscError):
    exit_code = 4


class MalformedFile(PscError):
    pass


class CountMismatch(PscError):
    pass


class DanglingInstanceReference(PscError):
    pass


class SizeMismatch(PscError):
    pass


class SpecMismatch(PscError):
    pass


class DegenerateInput(PscError):
    pass


class NoLabels(PscError):
    pass


class EmptyInput(PscError):
    pass


class ZeroVector(PscError):
    pass


class TooFewSamples(PscError):
    pass


class AllIgnored(PscError):
    pass
