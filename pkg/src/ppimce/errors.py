"""
Exception hierarchy shared by the simulator, the crypto kernels and the CLI.
"""


class PpimceError(RuntimeError):
    """Base class for every runtime failure raised by the package."""


class DomainError(PpimceError, ValueError):
    """Operand outside the domain of an operation (residue >= q, wrong NTT domain, ...)."""


class CapacityError(PpimceError):
    """A memory, bank or table capacity would be exceeded."""


class ParseError(PpimceError, ValueError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        if line:
            message = f"line {line}: {message}"
        super().__init__(message)


class LevelError(PpimceError):
    """Ciphertext has no modulus left to consume."""


class KeyMissingError(PpimceError, KeyError):
    pass


class ProtocolError(PpimceError):
    pass


class DecodeError(PpimceError):
    pass


class BackpressureError(CapacityError):
    """The C-Inst bank is full; the front end must stall."""
