from typing import Sequence


class SensorSelectError(Exception):
    """Base error. `exit_code` is what the CLI returns when this escapes a command."""

    exit_code: int = 1


class SpecError(SensorSelectError):
    exit_code = 2


class ConfigurationError(SpecError):
    pass


class CapacityError(SpecError):
    def __init__(self, n: int, cap: int, what: str = "enumeration", quantity: str = "N"):
        self.n = n
        self.cap = cap
        super().__init__(f"{what} needs {quantity} <= {cap}, got {quantity} = {n}")


class DimensionMismatchError(SpecError):
    pass


class NumericalDegeneracyError(SensorSelectError):
    exit_code = 3

    def __init__(self, bits: int, indices: Sequence[int], jitter: float):
        self.bits = bits
        self.indices = tuple(indices)
        self.jitter = jitter
        super().__init__(
            f"M(S,S) is singular for S = {list(self.indices)} (bits 0x{bits:x}) "
            f"even with jitter {jitter:g}"
        )


class ChainInvariantError(SensorSelectError):
    pass
