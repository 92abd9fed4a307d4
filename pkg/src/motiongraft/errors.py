"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad configuration value or unknown key."""


class ContractError(ValueError):
    """An input violates a documented shape/value contract."""


class DatasetError(IOError):
    """Missing or corrupt on-disk dataset element."""


class CheckpointError(IOError):
    """Checkpoint archive cannot be loaded or does not match the config."""


class DegeneratePoseError(ValueError):
    """A pose is too degenerate to define the requested transform."""


class GuidanceError(RuntimeError):
    """Guidance produced a non-finite gradient; carries the timestep."""

    def __init__(self, message: str, timestep: int | None = None):
        super().__init__(message)
        self.timestep = timestep
