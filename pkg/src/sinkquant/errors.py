"""Exception hierarchy with stable machine-readable codes.

Every failure raised by this library carries a short string ``code`` plus an
optional ``context`` dict so front ends (notably the CLI) can serialize errors
uniformly as ``{"code": ..., "message": ..., "context": {...}}``.

Documented codes and their CLI exit statuses:

====================  ===========  =====================================
exception             code         exit status
====================  ===========  =====================================
UsageError            usage        2
ConfigError           config       2
ShapeError            shape        2
LayoutError           layout       2
CalibrationError      calibration  2
DiscoveryError        discovery    2
StateError            state        2
BoundsError           bounds       2
FormatError           format       3
NumericError          numeric      4
====================  ===========  =====================================
"""

from __future__ import annotations


class SinkQuantError(Exception):
    """Base class for all library errors."""

    code = "error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.message = message
        self.context = {k: v for k, v in context.items() if v is not None}

    def to_json_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "context": self.context}


class UsageError(SinkQuantError):
    """Invalid command-line flags or flag combinations."""

    code = "usage"


class ConfigError(SinkQuantError):
    """Invalid or inconsistent configuration (unknown preset, missing params, ...)."""

    code = "config"


class ShapeError(SinkQuantError):
    """Tensor rank or dimensions incompatible with the operation."""

    code = "shape"


class LayoutError(SinkQuantError):
    """Quantization parameters do not match the tensor's group layout."""

    code = "layout"


class CalibrationError(SinkQuantError):
    """Calibration data missing or unusable."""

    code = "calibration"


class DiscoveryError(SinkQuantError):
    """Profile discovery found no channel crossing the outlier threshold."""

    code = "discovery"


class StateError(SinkQuantError):
    """Operation not valid for the container's current state."""

    code = "state"


class BoundsError(SinkQuantError):
    """An index is outside the valid range."""

    code = "bounds"


class FormatError(SinkQuantError):
    """Malformed file content (bad magic, truncated payload, bad manifest, ...)."""

    code = "format"


class NumericError(SinkQuantError):
    """Numeric failure: NaN/Inf produced or fed where finite values are required."""

    code = "numeric"


#: Exit status used by the CLI for each error code.
EXIT_STATUS = {
    "usage": 2,
    "config": 2,
    "shape": 2,
    "layout": 2,
    "calibration": 2,
    "discovery": 2,
    "state": 2,
    "bounds": 2,
    "format": 3,
    "numeric": 4,
}


def exit_status(exc: SinkQuantError) -> int:
    return EXIT_STATUS.get(exc.code, 1)
