"""Exception hierarchy shared across the workbench."""


class SlidesegError(Exception):
    """Base class for all workbench errors."""


class ValidationError(SlidesegError):
    """Bad user input: malformed parameters, schema violations, bounds errors."""


class FormatError(ValidationError):
    """Malformed interchange document (JSON/XML). Carries a location when known."""

    def __init__(self, msg: str, location: str | None = None):
        self.location = location
        super().__init__(msg if location is None else f"{msg} (at {location})")


class BackendError(SlidesegError):
    """Segmentation backend failure: crash, timeout, or refusal."""


class ProtocolError(BackendError):
    """Malformed frame or header on the external backend stream."""
