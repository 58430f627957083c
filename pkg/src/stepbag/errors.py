"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`StepbagError`,
so callers (the CLI in particular) can map them to exit codes.
"""


class StepbagError(Exception):
    """Base class for all library errors."""


class DataError(StepbagError, ValueError):
    """Problem with input data (ingestion or dataset construction)."""


class MissingColumn(DataError):
    def __init__(self, column):
        super().__init__(f"column {column!r} not found in header")
        self.column = column


class NonNumericCell(DataError):
    def __init__(self, row, col, value):
        super().__init__(f"row {row}, column {col!r}: cannot parse {value!r} as a number")
        self.row = row
        self.col = col


class NonFiniteValue(DataError):
    def __init__(self, where):
        super().__init__(f"non-finite value at {where}")
        self.where = where


class DuplicateId(DataError):
    def __init__(self, ident):
        super().__init__(f"duplicate identifier {ident!r}")
        self.ident = ident


class TooFewSamples(DataError):
    pass


class DegenerateBaseline(DataError):
    pass


class ZeroVariance(DataError):
    pass


class InvalidSpec(StepbagError, ValueError):
    pass


class DimensionMismatch(StepbagError, ValueError):
    pass


class FeatureMismatch(DataError):
    pass


class EmptySampleSet(StepbagError, ValueError):
    pass


class NoOobSamples(StepbagError, ValueError):
    pass


class NoCandidates(StepbagError):
    """Candidate selection retained no feature."""


class TooFewReplicates(StepbagError, ValueError):
    pass


class TooFewPairs(StepbagError, ValueError):
    pass


class ConstantVector(StepbagError, ValueError):
    pass


class AllZeroTargets(StepbagError, ValueError):
    pass
