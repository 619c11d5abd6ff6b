"""Exception hierarchy.

Validation and configuration problems derive from :class:`No2DenseError`
with ``exit_code = 1``; runtime failures use ``exit_code = 2``.
"""


class No2DenseError(Exception):
    exit_code = 2


class ValidationError(No2DenseError, ValueError):
    exit_code = 1


class FormatError(ValidationError):
    """Malformed sample container or sidecar."""


class ConfigError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class LabelError(ValidationError):
    pass


class MissingLabelError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class DegenerateStatsError(ValidationError):
    def __init__(self, channel):
        self.channel = channel
        super().__init__(f"zero variance in channel {channel!r}")


class SceneTooSmallError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class UndefinedR2Error(ValidationError):
    """Targets have zero variance. ``mae`` and ``mse`` are still attached."""

    def __init__(self, mae, mse):
        self.mae = mae
        self.mse = mse
        super().__init__(f"R2 undefined for constant targets (mae={mae:.6g}, mse={mse:.6g})")


class NonFiniteLossError(No2DenseError, FloatingPointError):
    def __init__(self, step, batch_ids, parts):
        self.step = step
        self.batch_ids = list(batch_ids)
        self.parts = dict(parts)
        super().__init__(f"non-finite loss at step {step}: parts={self.parts} batch={self.batch_ids}")
