"""Exception types shared across the package."""


class KernelManifoldError(Exception):
    """Base class for errors raised by this package."""


class InvalidArgumentError(KernelManifoldError, ValueError):
    pass


class ParseError(KernelManifoldError, ValueError):
    """Malformed kernel expression. ``offset`` is a byte offset into the UTF-8 input."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class NumericalFailure(KernelManifoldError, ArithmeticError):
    pass


class FitFailure(NumericalFailure):
    pass


class DegenerateGeometryError(KernelManifoldError):
    pass


class ExhaustedLibraryError(KernelManifoldError):
    pass


class TemplateError(KernelManifoldError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else "template error"


class ConfigurationError(KernelManifoldError):
    pass


class TransportError(KernelManifoldError):
    def __init__(self, message: str, status: int | None = None, body: str = ""):
        super().__init__(message if status is None else f"{message} (HTTP {status}): {body[:200]}")
        self.status = status
        self.body = body
