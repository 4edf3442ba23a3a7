"""Exception hierarchy.

Every error carries a short machine-parsable ``category`` and the process
exit code the command-line front end maps it to (2 usage/config,
3 data/format, 4 numerical failure).
"""


class JointSegError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(JointSegError, ValueError):
    category = "config"
    exit_code = 2


class ProtocolError(JointSegError, ValueError):
    category = "protocol"
    exit_code = 2


class DataError(JointSegError, ValueError):
    category = "data"
    exit_code = 3


class FormatError(JointSegError, ValueError):
    category = "format"
    exit_code = 3


class CorruptFileError(FormatError):
    category = "corrupt"


class InvalidGridError(DataError):
    category = "grid"


class BoundaryError(DataError):
    category = "boundary"


class EmptyRegionError(DataError):
    category = "empty-region"


class OverlapError(DataError):
    category = "overlap"


class DomainError(JointSegError, ValueError):
    category = "domain"
    exit_code = 4


class NumericalError(JointSegError, ArithmeticError):
    category = "numerical"
    exit_code = 4


class DecompositionError(NumericalError):
    category = "decomposition"
