"""Exception types raised across the package."""


class VQTTSError(Exception):
    """Base class for package errors."""


class ShapeError(VQTTSError, ValueError):
    pass


class NonFiniteError(VQTTSError, FloatingPointError):
    pass


class InventoryError(VQTTSError, ValueError):
    pass


class CTCFeasibilityError(VQTTSError, ValueError):
    pass


class ManifestError(VQTTSError, ValueError):
    pass


class AudioFormatError(VQTTSError, ValueError):
    pass


class CheckpointError(VQTTSError, ValueError):
    pass


class UnknownSpeakerError(VQTTSError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown speaker"
