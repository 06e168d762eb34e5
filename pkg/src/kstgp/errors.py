"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class KSTGPError(Exception):
    exit_code = 1


class FactorizationFailure(KSTGPError):
    """Cholesky of the control-point covariance failed even with maximal jitter."""

    exit_code = 11

    def __init__(self, message, af_id=None):
        self.af_id = af_id
        if af_id is not None:
            message = f"{message} (activation {af_id})"
        super().__init__(message)


class InvalidConfig(KSTGPError):
    exit_code = 5


class ShapeMismatch(KSTGPError):
    exit_code = 14


class TrainingDiverged(KSTGPError):
    exit_code = 6


class EmptySet(KSTGPError):
    exit_code = 13


class ParseError(KSTGPError):
    exit_code = 3

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} at {', '.join(where)}"
        super().__init__(message)


class NonBinaryLabel(KSTGPError):
    exit_code = 4


class DegenerateColumn(KSTGPError):
    exit_code = 12


class DimensionMismatch(KSTGPError):
    exit_code = 7


class ModelFormatError(KSTGPError):
    exit_code = 8


class UnknownAF(KSTGPError):
    exit_code = 9


class RowOutOfRange(KSTGPError):
    exit_code = 10
