"""Exception types shared across the package."""


class PetlTowerError(Exception):
    """Base class for all package errors."""


class ShapeError(PetlTowerError):
    """Operand shapes are incompatible."""


class ConfigurationError(PetlTowerError):
    """A module was assembled with inconsistent settings."""


class StateError(PetlTowerError):
    """Operation invalid in the current object state (e.g. double merge)."""


class OracleInvalidError(PetlTowerError):
    """The function under gradient check violated the oracle preconditions."""


class ContractError(PetlTowerError):
    """A caller-side contract was violated (e.g. non-normalized embeddings)."""


class LabelError(PetlTowerError):
    """Match labels are malformed (e.g. a row with no positive)."""


class EvaluationError(PetlTowerError):
    """Retrieval evaluation cannot proceed (e.g. a query with no relevant item)."""


class ArchiveError(PetlTowerError):
    """Base class for weight-archive problems."""


class CorruptArchiveError(ArchiveError):
    """Archive bytes fail magic, layout, or checksum validation."""


class FingerprintMismatchError(ArchiveError):
    """Archive was produced under a different architecture fingerprint."""
