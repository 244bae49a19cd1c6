"""Exception hierarchy.

Each error carries the CLI exit code it maps to: 2 for bad user input,
3 for malformed data, 4 for broken internal invariants.
"""


class FV2ESError(Exception):
    exit_code = 4


class UserInputError(FV2ESError):
    exit_code = 2


class DataFormatError(FV2ESError):
    exit_code = 3


class InvariantError(FV2ESError):
    exit_code = 4


class DimensionMismatch(InvariantError, ValueError):
    pass


class NonFiniteError(InvariantError, FloatingPointError):
    pass


class NotScalarLoss(InvariantError, ValueError):
    pass


class BadShape(UserInputError, ValueError):
    pass


class BadSide(UserInputError, ValueError):
    pass


class BadLayer(InvariantError, ValueError):
    pass


class TooShort(UserInputError, ValueError):
    pass


class UnsupportedCodec(DataFormatError):
    pass


class TensorFormatError(DataFormatError):
    pass


class DegenerateClass(UserInputError, ValueError):
    pass


class LengthMismatch(DataFormatError, ValueError):
    pass


class EmptyAssets(UserInputError, ValueError):
    pass


class EmptyList(UserInputError, ValueError):
    pass


class CheckpointError(UserInputError):
    pass
