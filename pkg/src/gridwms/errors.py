"""Shared exception base for the package."""


class WmsError(Exception):
    """Base class for all gridwms errors."""

    code = "Internal"


class UnknownJobError(WmsError):
    code = "UnknownJob"


class UnauthorizedError(WmsError):
    code = "Unauthorized"
