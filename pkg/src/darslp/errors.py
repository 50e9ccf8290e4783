"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for validation problems,
3 for a missing upstream artifact, 4 for numeric divergence.
"""


class DarslpError(Exception):
    exit_code = 2


class ValidationError(DarslpError, ValueError):
    exit_code = 2


class LayoutMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DegenerateFrame(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


class SequenceTooLong(ValidationError):
    pass


class FormatError(ValidationError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class HashMismatch(ValidationError):
    pass


class StaleArtifact(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class EmptySequence(ValidationError):
    pass


class AllMaskedRow(ValidationError):
    pass


class LengthOutOfRange(ValidationError):
    pass


class DegenerateSigma(ValidationError):
    pass


class TooFewFrames(ValidationError):
    pass


class MissingUpstream(DarslpError):
    exit_code = 3


class DivergenceDetected(DarslpError, ArithmeticError):
    exit_code = 4


class RankDeficient(UserWarning):
    """Emitted when a projection has fewer informative axes than requested."""
