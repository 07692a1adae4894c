"""Exception hierarchy shared by every module of the package."""


class Cube3DError(Exception):
    pass


class NotACube(Cube3DError, ValueError):
    pass


class OutOfRange(Cube3DError, IndexError):
    pass


class LengthMismatch(Cube3DError, ValueError):
    pass


class Desync(Cube3DError, RuntimeError):
    """Group members disagreed on the collective call sequence."""


class Aborted(Cube3DError, RuntimeError):
    """Raised in a rank worker when another rank already failed."""


class IndivisibleShape(Cube3DError, ValueError):
    def __init__(self, dim: str, size: int, divisor: int):
        super().__init__(f"{dim}={size} is not divisible by {divisor}")
        self.dim = dim
        self.size = size
        self.divisor = divisor


class InconsistentFamily(Cube3DError, ValueError):
    pass


class ShapeMismatch(Cube3DError, ValueError):
    pass


class DirectionClash(Cube3DError, ValueError):
    pass


class BatchMismatch(Cube3DError, ValueError):
    pass


class GroupMismatch(Cube3DError, ValueError):
    pass


class HeadsIndivisible(Cube3DError, ValueError):
    pass


class NonFinite(Cube3DError, ArithmeticError):
    pass


class ConfigInvalid(Cube3DError, ValueError):
    pass
