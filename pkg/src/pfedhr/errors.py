"""Exception hierarchy shared by every pfedhr module."""


class PFedHRError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(PFedHRError, ValueError):
    pass


class NoTape(PFedHRError, RuntimeError):
    """Raised when a backward pass is requested without a recorded forward."""


class UnknownTemplate(PFedHRError, KeyError):
    pass


class EmptyTemplateList(PFedHRError, ValueError):
    pass


class EmptyUpload(PFedHRError, ValueError):
    pass


class DegenerateInput(PFedHRError, ValueError):
    pass


class TooFewLayers(PFedHRError, ValueError):
    pass


class UnresolvableRef(PFedHRError, KeyError):
    pass


class LabelFlagMismatch(PFedHRError, ValueError):
    pass


class ClassCountMismatch(PFedHRError, ValueError):
    pass


class ConfigInvalid(PFedHRError, ValueError):
    """Raised with a field-level message when a configuration is rejected."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class BadMagic(PFedHRError, ValueError):
    pass


class CountMismatch(PFedHRError, ValueError):
    pass


class TruncatedFile(PFedHRError, ValueError):
    pass


class InsufficientData(PFedHRError, ValueError):
    pass


class IncompatibleSpec(PFedHRError, ValueError):
    pass


class CheckpointError(PFedHRError, ValueError):
    pass
