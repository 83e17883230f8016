"""Exception types shared across the package."""


class UwaError(Exception):
    """Base class for every error raised by uwadbn."""


class InputError(UwaError, ValueError):
    """A caller passed data that violates an operation's preconditions."""


class DegenerateInputError(InputError):
    """Input is well-formed but carries no usable information (e.g. a constant signal)."""


class ConfigurationError(UwaError, ValueError):
    """Inconsistent or missing configuration (sample rates, model files, presets)."""


class DetectionError(UwaError):
    """No pilot was found above the detection threshold."""


class EstimationError(UwaError):
    """Doppler estimation produced a physically meaningless value."""


class CapabilityError(UwaError):
    """The request is valid but too large for an exact (enumeration) routine."""
