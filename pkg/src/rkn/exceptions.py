"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`RKNError`,
which the CLI maps to exit code 2 (3 for :class:`Diverged`).
"""


class RKNError(ValueError):
    """Base class for all package errors."""


class UnknownSymbol(RKNError):
    def __init__(self, position, char, seq_id=None):
        self.position = position
        self.char = char
        self.seq_id = seq_id
        where = f" in sequence {seq_id!r}" if seq_id is not None else ""
        super().__init__(f"unknown symbol {char!r} at position {position}{where}")


class MalformedFasta(RKNError):
    def __init__(self, line_no, reason="sequence line before any header"):
        self.line_no = line_no
        super().__init__(f"malformed FASTA at line {line_no}: {reason}")


class EmptySequence(RKNError):
    pass


class NonIndicatorEncoding(RKNError):
    pass


class SequenceShorterThanK(RKNError):
    pass


class EnumerationTooLarge(RKNError):
    pass


class NotSymmetric(RKNError):
    pass


class NoConvergence(RKNError):
    def __init__(self, iterations):
        self.iterations = iterations
        super().__init__(f"eigensolver did not converge ({iterations} iterations)")


class NonPositive(RKNError):
    def __init__(self, min_eigenvalue):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(f"matrix is not positive definite (min eigenvalue + eps = {min_eigenvalue:.3e})")


class Singular(RKNError):
    pass


class DegenerateInput(RKNError):
    pass


class DegenerateTrace(RKNError):
    pass


class DimensionMismatch(RKNError):
    pass


class LabelMismatch(RKNError):
    pass


class NonFinite(RKNError):
    pass


class Diverged(RKNError):
    pass


class EmptyValidation(RKNError):
    pass


class TooFewKmers(RKNError):
    pass


class ModelFormatError(RKNError):
    pass


class ConfigError(RKNError):
    pass


class EigengapWarning(RuntimeWarning):
    """Nearly equal eigenvalues met in the inverse square root adjoint (the result stays exact)."""
