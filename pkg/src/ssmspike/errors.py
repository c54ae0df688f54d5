"""Exception types shared across the package."""


class SsmSpikeError(Exception):
    pass


class InvalidDimensionError(SsmSpikeError, ValueError):
    pass


class ConfigError(SsmSpikeError, ValueError):
    """Invalid configuration. ``field`` names the offending entry when known."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DivergedStateError(SsmSpikeError, FloatingPointError):
    def __init__(self, layer, step, what="state"):
        self.layer = layer
        self.step = step
        super().__init__(f"non-finite {what} in layer {layer} at step {step}")


class StaleTapeError(SsmSpikeError):
    pass


class DegenerateBatchError(SsmSpikeError, ValueError):
    pass


class DataError(SsmSpikeError, ValueError):
    pass


class IntegrityError(SsmSpikeError, IOError):
    pass


class TrainingDivergedError(SsmSpikeError, FloatingPointError):
    def __init__(self, step, parameter, layer=None):
        self.step = step
        self.parameter = parameter
        self.layer = layer
        where = f"layer {layer} " if layer is not None else ""
        super().__init__(f"non-finite gradient for {where}{parameter} at step {step}")
