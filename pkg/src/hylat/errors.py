"""Exception types shared across the package."""


class HylatError(Exception):
    pass


class CapacityError(HylatError):
    """An assembled sequence would exceed ``max_seq_len``."""


class InputError(HylatError, ValueError):
    pass


class NumericError(HylatError, ArithmeticError):
    pass


class ShapeError(HylatError, ValueError):
    pass


class ProtocolError(HylatError):
    pass


class AlignmentError(HylatError, ValueError):
    pass


class CodecError(HylatError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IoError(HylatError, OSError):
    pass
