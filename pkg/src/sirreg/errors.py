"""Exception hierarchy shared across the package."""


class ValidationError(ValueError):
    """Invalid user input: bad shapes, bad config values, malformed files."""


class GridMismatchError(ValidationError):
    """Two objects were expected to live on the same grid but do not."""


class DegenerateEnsembleError(ValidationError):
    """Every importance weight is zero; resampling is undefined."""


class SvolError(ValidationError):
    """Base class for container-format errors. ``code`` identifies the failure."""

    code = "svol"


class SvolMagicError(SvolError):
    code = "bad_magic"


class SvolVersionError(SvolError):
    code = "bad_version"


class SvolTruncatedError(SvolError):
    code = "truncated"


class SvolHeaderError(SvolError):
    code = "bad_header"
