"""Exception hierarchy.  Each CLI-visible error carries the exit code the CLI reports."""


class InlineMapError(Exception):
    exit_code = 1


class MissingDebugInfo(InlineMapError):
    exit_code = 3


class MalformedDebugInfo(InlineMapError):
    exit_code = 3


class StrippedBinary(InlineMapError):
    exit_code = 4


class UnsupportedArchitecture(InlineMapError):
    exit_code = 1


class SchemaMismatch(InlineMapError):
    exit_code = 5


class EmptyGroup(InlineMapError):
    exit_code = 6


class UnbalancedBraces(InlineMapError):
    def __init__(self, file, line=None):
        self.file = file
        self.line = line
        where = f"{file}:{line}" if line else str(file)
        super().__init__(f"unbalanced braces in {where}")


class DegenerateOSF(InlineMapError):
    pass


class EmptyInput(InlineMapError):
    exit_code = 6


class NoBFIs(InlineMapError):
    exit_code = 6


class UnknownFunction(InlineMapError, KeyError):
    def __str__(self):
        return f"unknown function: {self.args[0]!r}"


class ZeroLengthCaller(InlineMapError, ZeroDivisionError):
    pass


class OracleFailure(InlineMapError):
    pass


class MissingGroundTruth(InlineMapError):
    pass


class UnresolvedEntry(InlineMapError):
    pass


class NoPairs(InlineMapError):
    exit_code = 6
