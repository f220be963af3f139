"""Exception types shared across the package."""


class DynactError(Exception):
    """Base class for all dynact errors."""


class InvalidInput(DynactError, ValueError):
    """An argument violates an operation's precondition."""


class CorruptData(DynactError):
    """Serialized or stored data failed validation."""


class NoSpace(DynactError):
    """The arena cannot satisfy an allocation at its current budget."""


class StoreRejected(DynactError):
    """Insertion failed even after the eviction policy was consulted."""


class NotFound(DynactError, KeyError):
    """The requested activation is not resident."""


class MustEvict(DynactError):
    """An entry is already at the minimum bit-width and cannot shrink further."""


class NothingToEvict(DynactError):
    """Victim selection was attempted on an empty store."""


class TrainingDiverged(DynactError):
    """Training loss became non-finite."""


class SchemaError(DynactError):
    """A metrics or trace file does not match the expected schema."""


class InvariantViolation(DynactError):
    """An internal consistency check failed during replay or benchmarking."""
