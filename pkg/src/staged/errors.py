"""Exception hierarchy shared by every stage of the pipeline."""


class StagedError(Exception):
    """Base class; the CLI prints ``error: <ClassName>: <message>`` for these."""


class IncompleteGrid(StagedError):
    pass


class DuplicateEntry(StagedError):
    pass


class DomainError(StagedError, ValueError):
    pass


class UnknownGene(StagedError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep messages readable
        return Exception.__str__(self)


class BinningError(StagedError):
    pass


class NonUniformGrid(StagedError):
    pass


class NumericalBlowup(StagedError, FloatingPointError):
    pass


class WarmupViolation(StagedError):
    pass


class NothingToPredict(StagedError):
    pass


class NothingToScore(StagedError):
    pass


class SchemaMismatch(StagedError):
    pass
