"""Exception types shared across the package."""


class FluidgroundError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FluidgroundError):
    """Invalid configuration value or unknown key. CLI exit code 2."""

    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class DimensionError(FluidgroundError):
    """Tensor/array shape mismatch."""

    def __init__(self, message, expected=None, got=None):
        self.expected = expected
        self.got = got
        if expected is not None or got is not None:
            message = f"{message} (expected {expected}, got {got})"
        super().__init__(message)


class TapeUsageError(FluidgroundError):
    """Misuse of the autodiff tape (backward on detached tensors, missing grads)."""


class SimulationDivergedError(FluidgroundError):
    """The SPH oracle produced non-finite state. CLI exit code 3."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class RolloutDivergedError(FluidgroundError):
    """Transition-model rollout left the sanity envelope. CLI exit code 3."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class CheckpointFormatError(FluidgroundError):
    """Corrupt or incompatible checkpoint container."""
