"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SimplexAllocError(Exception):
    exit_code = 1


class InvalidInputError(SimplexAllocError, ValueError):
    exit_code = 2


class InfeasibleConfigError(SimplexAllocError, ValueError):
    exit_code = 3


class NumericalError(SimplexAllocError, ArithmeticError):
    exit_code = 4
