"""
Exception hierarchy for the scene flow engine.

Management commands translate these into exit codes (see command_base.py),
so every failure a user can trigger should surface as one of these types.
"""
from django.core.exceptions import ImproperlyConfigured


class SceneFlowError(Exception):
    """Base class for all engine errors."""


class ContractViolation(SceneFlowError, ValueError):
    """A documented precondition was broken by the caller."""


class StructuralError(ContractViolation):
    """Two sparse tensors that must share a coordinate set do not."""


class NumericError(SceneFlowError, ArithmeticError):
    """A layer produced non-finite values."""

    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"non-finite values produced by layer '{layer}'")


class TrainingDivergedError(NumericError):
    """The training loss became NaN or infinite."""

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__('loss', f"training diverged at step {step} (loss={loss})")


class EmptyBinError(SceneFlowError):
    """Strict range-wise evaluation met a (bin, class) cell with no points."""

    def __init__(self, bin_label, motion_class):
        self.bin_label = bin_label
        self.motion_class = motion_class
        super().__init__(f"range bin {bin_label} has no {motion_class} points")


class ConfigError(ImproperlyConfigured, SceneFlowError):
    """A configuration value is missing, unparsable or out of range."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class FormatError(SceneFlowError):
    """Base class for SFFP / SSFW / SSFL parse and write errors."""

    def __init__(self, section, message):
        self.section = section
        super().__init__(f"[{section}] {message}")


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedSectionError(FormatError):
    pass


class MissingSectionError(FormatError):
    pass


class StructureError(FormatError):
    """Section payload sizes disagree with each other or with declared shapes."""


class DuplicateTensorError(FormatError):
    pass
