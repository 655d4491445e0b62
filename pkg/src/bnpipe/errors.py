"""Exception hierarchy.

Each error carries an ``exit_code`` used by the command-line front end:
1 for usage/configuration problems, 2 for bad data, 3 for runtime failures.
"""


class BnpipeError(Exception):
    exit_code = 3


class ConfigError(BnpipeError):
    exit_code = 1


class DataError(BnpipeError):
    exit_code = 2


class DuplicateIndex(DataError):
    pass


class IndexOutOfBounds(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class EmptyTensor(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class NonBinaryTensor(DataError):
    pass


class TooFewEntries(DataError):
    pass


class CoordinateOutOfRange(DataError):
    pass


class RaggedSequences(DataError):
    pass


class DuplicateTrialId(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class UnknownClass(DataError):
    pass


class TooFewPairs(DataError):
    pass


class DegenerateMarginals(DataError):
    pass


class DegenerateScores(DataError):
    pass


class NonConsecutiveChunks(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line
        self.path = path


class ManifestError(DataError):
    pass


class DeepHeadUnsupported(ConfigError):
    pass


class NonFiniteLoss(BnpipeError):
    """Raised when training diverges; ``last_state`` holds the last finite parameters."""

    def __init__(self, message, epoch=None, last_state=None):
        super().__init__(message)
        self.epoch = epoch
        self.last_state = last_state


class MissingPrediction(BnpipeError):
    pass


class LabelerFailure(BnpipeError):
    def __init__(self, message, t=None):
        super().__init__(f"labeler failed at t={t}: {message}" if t is not None else message)
        self.t = t
