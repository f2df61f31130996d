"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


class DataError(Exception):
    """Malformed annotation data or image files."""


class TrainingDivergedError(Exception):
    """Training loss became non-finite."""

    def __init__(self, message: str, stage: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch
