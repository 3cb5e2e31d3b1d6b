"""Exception taxonomy shared by every cmpr module.

The CLI maps these onto stable exit codes (see cmpr.cli).
"""


class CmprError(Exception):
    """Base class for all cmpr errors."""


class DimensionError(CmprError):
    """Array shapes are incompatible with the requested operation."""


class DomainError(CmprError):
    """A value is outside the mathematical domain of the operation."""


class DegenerateInputError(CmprError):
    """Input is structurally valid but degenerate (e.g. a zero row)."""


class DegenerateTargetError(CmprError):
    """Regression target carries no variance."""


class DegenerateLabelError(CmprError):
    """Binary labels contain only one class."""


class ContractError(CmprError):
    """A caller violated an API precondition."""


class PairingError(ContractError):
    """Embedding batches do not match the requested contrastive pairing."""


class ConfigError(CmprError):
    """A configuration object is internally inconsistent."""


class NonFiniteError(CmprError):
    """A NaN or Inf appeared where only finite values are allowed."""
