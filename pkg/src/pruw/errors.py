"""Exception hierarchy shared by all modules."""


class PruwError(Exception):
    """Base class for all library errors."""


class FieldMismatchError(PruwError):
    """Two operands or components were built over different moduli."""


class SingularMatrixError(PruwError):
    """Linear system has no unique solution over the field."""


class PlanError(PruwError):
    """Scheme parameters or budgets outside the supported range."""


class ProtocolError(PruwError):
    """Malformed, mis-sized, or out-of-order protocol message."""


class CorruptionError(PruwError):
    """Stored or received symbols are mutually inconsistent."""


class FrameError(PruwError):
    """Byte stream does not parse as a valid wire frame."""
